"""
Adjudicators decide what happens to an old memory item given newer evidence.

RuleBasedAdjudicator is deterministic and maps the firing condition to a
verdict. ExternalAdjudicator forwards each context to a judge service over
HTTP and degrades to a configured fallback verdict on any failure.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence

import httpx
from pydantic import ValidationError

from cupmem.cache import body_digest, cache_key, get_cached, set_cached
from cupmem.config import DEFAULT_VERDICT_MAP, AdjudicatorConfig, AdjudicatorKind
from cupmem.logging_config import metrics
from cupmem.middleware import ITEM_HEADER
from cupmem.monitoring import monitoring
from cupmem.schemas import (
    AdjudicationContext,
    AdjudicationDecision,
    ConditionKind,
    Proposition,
    Verdict,
    WireVerdict,
)

logger = logging.getLogger(__name__)


class Adjudicator:
    """Interface: decide one context, or a batch in order"""

    name = "adjudicator"

    def decide(self, context: AdjudicationContext) -> AdjudicationDecision:
        raise NotImplementedError

    def decide_batch(self, contexts: Sequence[AdjudicationContext]) -> List[AdjudicationDecision]:
        return [self.decide(context) for context in contexts]

    def close(self) -> None:
        pass


class RuleBasedAdjudicator(Adjudicator):
    name = "rule_based"

    def __init__(self, verdict_map: Optional[Dict[ConditionKind, Verdict]] = None):
        self.verdict_map = dict(verdict_map or DEFAULT_VERDICT_MAP)

    def decide(self, context: AdjudicationContext) -> AdjudicationDecision:
        proposal = context.proposal
        condition = proposal.condition
        old = context.old_item
        if condition is None:
            return AdjudicationDecision(verdict=Verdict.KEEP, rationale="no incompatibility condition fired")

        verdict = self.verdict_map[condition.kind]
        replacement: Optional[str] = None
        if condition.kind == ConditionKind.SINGLE_SLOT:
            values = sorted({u.value.value for u in proposal.supporting_updates if u.slot == old.slot})
            if len(values) == 1:
                replacement = values[0]
            elif verdict == Verdict.REPLACE:
                return AdjudicationDecision(
                    verdict=Verdict.UNKNOWN,
                    rationale=f"{len(values)} competing values for {old.slot.path}; replacement underdetermined",
                )
        elif condition.kind == ConditionKind.DEPENDENCY and condition.implied_value:
            verdict = Verdict.REPLACE
            replacement = condition.implied_value

        source = f"rule {condition.rule_id}" if condition.rule_id else "single-slot conflict"
        if verdict == Verdict.REPLACE:
            if replacement is None:
                return AdjudicationDecision(
                    verdict=Verdict.UNKNOWN,
                    rationale=f"{source} invalidates {old.proposition}; no replacement is determined",
                )
            return AdjudicationDecision(
                verdict=Verdict.REPLACE,
                replacement=Proposition(attribute=old.slot, value=replacement),
                rationale=f"{source}: {old.proposition} replaced by {replacement}",
            )
        if verdict == Verdict.UNKNOWN:
            rationale = f"{source} invalidates {old.proposition}; current value unknown"
        elif verdict == Verdict.STALE:
            rationale = f"{source} retires {old.proposition}"
        else:
            rationale = f"{source} fired but {old.proposition} is kept"
        return AdjudicationDecision(verdict=verdict, rationale=rationale)


def wire_request(context: AdjudicationContext) -> dict:
    old = context.old_item
    return {
        "schema_version": context.schema_version,
        "old_item": {
            "slot": old.slot.path,
            "value": old.proposition.value,
            "timestamp": old.timestamp.isoformat(),
        },
        "updates": [
            {
                "slot": u.slot.path,
                "value": u.value.value,
                "timestamp": u.timestamp.isoformat(),
                "origin": u.origin.value,
            }
            for u in context.proposal.supporting_updates
        ],
        "session_text": context.session_text,
        "rationale_hint": context.proposal.rationale,
    }


class ExternalAdjudicator(Adjudicator):
    name = "external"

    def __init__(self, config: AdjudicatorConfig, client: Optional[httpx.Client] = None):
        if not config.endpoint:
            raise ValueError("ExternalAdjudicator needs an endpoint")
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout)

    def close(self) -> None:
        self._client.close()

    def _fallback(self, reason: str) -> AdjudicationDecision:
        return AdjudicationDecision(
            verdict=self.config.fallback_verdict,
            rationale=f"external adjudicator failed ({reason}); fallback {self.config.fallback_verdict.value}",
        )

    def _to_decision(self, body: dict, context: AdjudicationContext) -> AdjudicationDecision:
        parsed = WireVerdict.model_validate(body)
        replacement = None
        if parsed.replacement is not None:
            replacement = Proposition(attribute=context.old_item.slot, value=parsed.replacement.value)
        return AdjudicationDecision(
            verdict=parsed.verdict,
            replacement=replacement,
            rationale=parsed.rationale or f"external verdict {parsed.verdict.value}",
        )

    def decide(self, context: AdjudicationContext) -> AdjudicationDecision:
        payload = wire_request(context)
        key = cache_key("verdict", body_digest(payload)) if self.config.cache_ttl else None
        if key:
            cached_body = get_cached(key)
            if cached_body is not None:
                logger.debug(f"Cache hit: {key}")
                try:
                    return self._to_decision(cached_body, context)
                except (ValidationError, ValueError):
                    logger.warning(f"Discarding unparseable cached verdict {key}")

        reason = "no attempt made"
        for attempt in range(self.config.max_retries + 1):
            try:
                response = self._client.post(
                    self.config.endpoint,
                    json=payload,
                    headers={ITEM_HEADER: context.old_item.id or ""},
                    timeout=self.config.timeout,
                )
                response.raise_for_status()
                body = response.json()
            except httpx.TimeoutException:
                reason = "timeout"
                logger.warning(f"Adjudicator timeout for {context.old_item.id} (attempt {attempt + 1})")
                continue
            except httpx.HTTPStatusError as e:
                reason = f"HTTP {e.response.status_code}"
                logger.warning(f"Adjudicator HTTP error for {context.old_item.id}: {e.response.status_code}")
                continue
            except httpx.HTTPError as e:
                reason = f"transport error: {e.__class__.__name__}"
                logger.warning(f"Adjudicator transport error for {context.old_item.id}: {e}")
                continue
            except ValueError:
                metrics.log_error("adjudicator_parse", "response body is not JSON", item_id=context.old_item.id)
                return self._fallback("unparseable response")

            try:
                decision = self._to_decision(body, context)
            except (ValidationError, ValueError) as e:
                metrics.log_error("adjudicator_parse", str(e), item_id=context.old_item.id)
                return self._fallback("unparseable response")
            if key:
                set_cached(key, body, self.config.cache_ttl)
            if monitoring:
                monitoring.record_verdict(decision.verdict.value, self.name)
            return decision

        reason = f"{reason} after {self.config.max_retries + 1} attempts"
        metrics.log_error("adjudicator_unavailable", reason, item_id=context.old_item.id)
        return self._fallback(reason)

    def decide_batch(self, contexts: Sequence[AdjudicationContext]) -> List[AdjudicationDecision]:
        if len(contexts) <= 1 or self.config.max_in_flight == 1:
            return [self.decide(context) for context in contexts]
        with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
            # map() yields results in submission order
            return list(pool.map(self.decide, contexts))


def build_adjudicator(config: Optional[AdjudicatorConfig] = None, client: Optional[httpx.Client] = None) -> Adjudicator:
    config = config or AdjudicatorConfig()
    if config.kind == AdjudicatorKind.EXTERNAL:
        return ExternalAdjudicator(config, client=client)
    return RuleBasedAdjudicator(config.verdict_map)
