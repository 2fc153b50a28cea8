"""
Bag-of-tokens lexical matching used by Global_k candidate search, the
readout trace and the naive baseline.
"""
import re
from typing import Callable, FrozenSet, Iterable, List, Sequence, Set, Tuple

from cupmem.schemas import MemoryItem, item_id_key

ALNUM = re.compile(r"[A-Za-z0-9]+")

# Function words dropped from probe text and generator leakage checks
STOPWORDS: FrozenSet[str] = frozenset("""
a about after again all also am an and any anything are around as at be been before being
but by can could did do does doing done for from get getting go going got had has have
having he her here hers him his how i if in into is it its just know last let like
lot me might more most much my myself new no not now of off on once one only or other our
out over own really right same see she should so some something still such than that the
their them then there these they thing things think this those through to too up us very
want was way we well were what when where which while who why will with would yet you your
s t m d ll ve re
""".split())


def normalized_tokens(text: str) -> List[str]:
    """Lowercase alphanumeric runs; underscores split tokens"""
    return [t.lower() for t in ALNUM.findall(text)]


def content_tokens(text: str) -> Set[str]:
    return {t for t in normalized_tokens(text) if t not in STOPWORDS}


def item_tokens(item: MemoryItem) -> Set[str]:
    tokens = set(normalized_tokens(item.proposition.value))
    for span in item.evidence:
        tokens.update(normalized_tokens(span.text))
    return tokens


def overlap_score(query_terms: Set[str], doc_terms: Set[str]) -> float:
    if not query_terms:
        return 0.0
    return len(query_terms & doc_terms) / len(query_terms)


def rank_by_overlap(
    items: Iterable[MemoryItem],
    query_terms: Iterable[str],
    k: int,
    newest_first: bool = True,
) -> List[Tuple[MemoryItem, float]]:
    """
    Top-k items by token overlap.

    Ties break on timestamp (newest first unless newest_first is False) and
    then on id ascending.
    """
    if k <= 0:
        return []
    terms = {t.lower() for t in query_terms}
    scored = [(item, overlap_score(terms, item_tokens(item))) for item in items]
    sign = -1 if newest_first else 1
    key: Callable[[Tuple[MemoryItem, float]], tuple] = lambda pair: (
        -pair[1],
        sign * pair[0].timestamp.timestamp(),
        item_id_key(pair[0].id),
    )
    scored.sort(key=key)
    return scored[:k]


def query_terms_for(texts: Sequence[str]) -> Set[str]:
    terms: Set[str] = set()
    for text in texts:
        terms.update(content_tokens(text))
    return terms
