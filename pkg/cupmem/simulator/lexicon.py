"""
Utterance vocabulary and the built-in distractor corpus.
"""
import logging
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from cupmem.errors import ConfigError
from cupmem.schemas import Session, SessionKind, SlotRef, StateSchema
from cupmem.state_schema import DATA_DIR, read_document

logger = logging.getLogger(__name__)

DEFAULT_LEXICON_PATH = DATA_DIR / "lexicon.yaml"
DEFAULT_DISTRACTOR_PATH = DATA_DIR / "distractors.yaml"


class SlotLexicon(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    intent: str
    values: Tuple[str, ...]
    state: Tuple[str, ...]
    implicit: Tuple[str, ...] = ()
    sr: Tuple[str, ...]
    pr: Tuple[str, ...]
    ipa: Tuple[str, ...]


class Lexicon(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    version: str
    acknowledgements: Tuple[str, ...]
    negation: Tuple[str, ...]
    slots: Dict[str, SlotLexicon]

    def for_slot(self, slot: SlotRef) -> Optional[SlotLexicon]:
        return self.slots.get(slot.path)


class _DistractorDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: str
    sessions: List[dict]


def render(value: str) -> str:
    return value.replace("_", " ")


def _parse(document: str, what: str) -> dict:
    try:
        data = yaml.safe_load(document)
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed {what}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{what} must be a mapping at the top level")
    return data


def load_lexicon(path: Union[str, Path, None] = None, schema: Optional[StateSchema] = None) -> Lexicon:
    lexicon = _load_lexicon(str(path or DEFAULT_LEXICON_PATH))
    if schema is not None:
        for key in lexicon.slots:
            if not schema.has_slot(SlotRef.model_validate(key)):
                raise ConfigError(f"lexicon names undeclared slot '{key}'")
    return lexicon


@lru_cache(maxsize=8)
def _load_lexicon(path: str) -> Lexicon:
    data = _parse(read_document(path), "lexicon")
    try:
        lexicon = Lexicon.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid lexicon {path}: {e.errors()[0].get('msg')}") from e
    logger.debug(f"Loaded lexicon {lexicon.version} with {len(lexicon.slots)} slots")
    return lexicon


@lru_cache(maxsize=8)
def load_distractors(path: Union[str, Path, None] = None) -> Tuple[Session, ...]:
    data = _parse(read_document(path or DEFAULT_DISTRACTOR_PATH), "distractor corpus")
    try:
        doc = _DistractorDoc.model_validate(data)
        sessions = tuple(
            Session.model_validate({**raw, "kind": SessionKind.DISTRACTOR})
            for raw in doc.sessions
        )
    except ValidationError as e:
        raise ConfigError(f"invalid distractor corpus: {e.errors()[0].get('msg')}") from e
    logger.debug(f"Loaded {len(sessions)} distractor sessions")
    return sessions
