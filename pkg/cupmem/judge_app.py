"""
Reference adjudication service speaking the external adjudicator protocol.

It re-derives the firing condition with the conflict oracle and applies the
rule-based verdict mapping, so an EXTERNAL configuration pointed at it
reproduces RULE_BASED decisions.
"""
import logging
import os
from functools import lru_cache
from typing import Tuple

from fastapi import FastAPI
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import ValidationError

from cupmem.adjudicator import RuleBasedAdjudicator
from cupmem.config import get_settings
from cupmem.conflict import belief_incompatible
from cupmem.errors import DomainError
from cupmem.middleware import MetricsMiddleware
from cupmem.schemas import (
    AdjudicateRequest,
    AdjudicationContext,
    EvidenceSpan,
    MemoryItem,
    Proposition,
    Provenance,
    RevisionProposal,
    StateSchema,
    UpdateCandidate,
    WireReplacement,
    WireVerdict,
)
from cupmem.state_schema import Knowledge, load_schema_file, require_slot

logger = logging.getLogger(__name__)

WIRE_ID = "wire"

app = FastAPI(
    title="cupmem judge",
    description="Reference adjudicator for the cupmem write pipeline",
    version="1.0.0",
)

# Metrics middleware - logs all judge requests with timing
app.add_middleware(MetricsMiddleware)


@lru_cache()
def get_rules() -> Tuple[StateSchema, Knowledge]:
    settings = get_settings()
    return load_schema_file(settings.schema_path, settings.knowledge_path)


def _context(request: AdjudicateRequest, schema: StateSchema, knowledge: Knowledge) -> AdjudicationContext:
    require_slot(schema, request.old_item.slot)
    for update in request.updates:
        require_slot(schema, update.slot)

    old = MemoryItem(
        id=WIRE_ID,
        slot=request.old_item.slot,
        proposition=Proposition(attribute=request.old_item.slot, value=request.old_item.value),
        provenance=Provenance(session_id=WIRE_ID, timestamp=request.old_item.timestamp),
    )
    evidence = (EvidenceSpan(session_id=WIRE_ID, turn_index=0, text=request.session_text or ""),)
    updates = [
        UpdateCandidate(
            slot=u.slot,
            value=Proposition(attribute=u.slot, value=u.value),
            origin=u.origin,
            confidence=1.0,
            timestamp=u.timestamp,
            evidence=evidence,
        )
        for u in request.updates
    ]
    condition = belief_incompatible(old.proposition, [u.value for u in updates], knowledge, schema)
    supporting = tuple(updates[i] for i in condition.supporting) if condition else ()
    proposal = RevisionProposal(
        old_item=WIRE_ID,
        supporting_updates=supporting,
        rationale=request.rationale_hint or "",
        confidence=1.0,
        triggering_rule=condition.rule_id if condition else None,
        condition=condition,
    )
    return AdjudicationContext(
        proposal=proposal,
        old_item=old,
        session_text=request.session_text,
        schema_version=request.schema_version,
    )


@app.post("/api/adjudicate", response_model=WireVerdict)
async def adjudicate(request: AdjudicateRequest):
    """Decide KEEP / STALE / REPLACE / UNKNOWN for one old item"""
    schema, knowledge = get_rules()
    if request.schema_version != schema.version:
        return JSONResponse(
            status_code=409,
            content={
                "error": "Schema version mismatch",
                "detail": f"judge serves '{schema.version}', request carries '{request.schema_version}'",
            },
        )
    try:
        context = _context(request, schema, knowledge)
    except DomainError as e:
        logger.warning(f"Rejected adjudication request: {e}")
        return JSONResponse(status_code=400, content={"error": "Invalid request", "detail": str(e)})
    except ValidationError as e:
        detail = e.errors()[0].get("msg")
        logger.warning(f"Rejected adjudication request: {detail}")
        return JSONResponse(status_code=400, content={"error": "Invalid request", "detail": detail})

    decision = RuleBasedAdjudicator().decide(context)
    return WireVerdict(
        verdict=decision.verdict,
        replacement=WireReplacement(value=decision.replacement.value) if decision.replacement else None,
        rationale=decision.rationale,
    )


@app.get("/")
async def root():
    """Root endpoint - service information"""
    return {
        "service": "cupmem judge",
        "version": "1.0.0",
        "status": "running",
        "docs": "/docs",
        "health": "/api/health",
    }


@app.get("/api/health")
async def health_check():
    try:
        schema, knowledge = get_rules()
        rules_status = f"{len(knowledge)} rules loaded"
        schema_version = schema.version
    except Exception as e:
        logger.error(f"Rule loading failed: {e}", exc_info=True)
        rules_status = f"unavailable: {str(e)[:100]}"
        schema_version = None

    return {
        "status": "ok",
        "service": "cupmem judge",
        "schema_version": schema_version,
        "rules": rules_status,
        "environment": get_settings().environment,
    }


@app.exception_handler(RequestValidationError)
async def validation_exception_handler(request, exc: RequestValidationError):
    logger.warning(f"Validation error: {exc.errors()}")
    error_messages = []
    for error in exc.errors():
        field = ".".join(str(loc) for loc in error.get("loc", []))
        error_messages.append(f"{field}: {error.get('msg', 'Invalid value')}")
    return JSONResponse(
        status_code=400,
        content={"error": "Validation error", "detail": "; ".join(error_messages)},
    )


@app.exception_handler(Exception)
async def global_exception_handler(request, exc):
    """Global exception handler - never expose internal details"""
    logger.error(f"Unhandled exception: {exc}", exc_info=True)

    from cupmem.logging_config import error_client
    if error_client:
        try:
            error_client.report_exception()
        except Exception:
            pass

    return JSONResponse(status_code=500, content={"error": "Internal server error"})


if __name__ == "__main__":
    import uvicorn
    port = int(os.getenv('PORT', 8000))
    uvicorn.run(app, host="0.0.0.0", port=port)
