import pytest

from cupmem.adjudicator import Adjudicator
from cupmem.config import IngestConfig
from cupmem.errors import ExtractorFailure, OutOfOrderSession
from cupmem.schemas import (
    AdjudicationDecision,
    CandidateTag,
    ItemStatus,
    LocalActionKind,
    Polarity,
    SlotRef,
    SourceKind,
    Verdict,
)
from cupmem.write_pipeline import (
    affected_regions,
    build_revision_candidates,
    extract_candidates,
    ingest_session,
    is_refinement,
    local_update,
    propose_revisions,
)

from tests.helpers import (
    ADJUSTMENT,
    CAREGIVING,
    CITY,
    COMMUTE,
    LIMITATION,
    ROUTINE,
    SKILL,
    WEATHER,
    WORK_CHANGE,
    at,
    prop,
    session,
    span,
)

CITY_SLOT = SlotRef.model_validate(CITY)
COMMUTE_SLOT = SlotRef.model_validate(COMMUTE)


def test_is_refinement():
    assert is_refinement("knee", "knee_sprain")
    assert not is_refinement("knee_sprain", "knee_sprain")
    assert not is_refinement("knee_sprain", "knee")
    assert not is_refinement("kn", "knee_sprain")


class TestExtraction:
    def test_filters_historical_and_wrapper_spans(self, schema):
        s = session(
            "s1", 1,
            span(CITY, "seattle", historical=True),
            span(SKILL, "python_programming", wrapper=True),
            span(SKILL, "classical_guitar"),
        )
        candidates = extract_candidates(s, schema)
        assert [c.value.value for c in candidates] == ["classical_guitar"]
        assert candidates[0].evidence[0].session_id == "s1"

    def test_single_slot_keeps_last_assert(self, schema):
        s = session("s1", 1, span(CITY, "seattle"), span(CITY, "portland"))
        assert [c.value.value for c in extract_candidates(s, schema)] == ["portland"]

    def test_multi_slot_drops_refined_values(self, schema):
        s = session("s1", 1, span(LIMITATION, "knee"), span(LIMITATION, "knee_sprain"))
        assert [c.value.value for c in extract_candidates(s, schema)] == ["knee_sprain"]

    def test_deny_spans_become_deny_candidates(self, schema):
        s = session("s1", 1, span(CITY, "seattle", polarity=Polarity.DENY))
        [candidate] = extract_candidates(s, schema)
        assert candidate.value.polarity == Polarity.DENY

    def test_last_mention_of_a_value_wins(self, schema):
        s = session("s1", 1, span(SKILL, "python_programming"), span(SKILL, "python_programming", polarity=Polarity.DENY))
        [candidate] = extract_candidates(s, schema)
        assert candidate.value.polarity == Polarity.DENY

        s = session("s1", 1, span(SKILL, "python_programming", polarity=Polarity.DENY), span(SKILL, "python_programming"))
        [candidate] = extract_candidates(s, schema)
        assert candidate.value.polarity == Polarity.ASSERT

    def test_failures(self, schema):
        with pytest.raises(ExtractorFailure):
            extract_candidates(session("s1", None, span(CITY, "seattle")), schema)
        with pytest.raises(ExtractorFailure, match="moon_base"):
            extract_candidates(session("s1", 1, span("location_and_living/moon_base", "crater")), schema)


class TestLocalUpdate:
    def candidate(self, schema, day, path, value, **flags):
        [c] = extract_candidates(session(f"s{day}", day, span(path, value, **flags)), schema)
        return c

    def test_add_noop_replace(self, store, schema):
        added = local_update(store, self.candidate(schema, 1, CITY, "seattle"))
        assert added.kind == LocalActionKind.ADD

        again = local_update(store, self.candidate(schema, 2, CITY, "seattle"))
        assert again.kind == LocalActionKind.NO_OP
        assert again.target == added.written

        replaced = local_update(store, self.candidate(schema, 3, CITY, "portland"))
        assert replaced.kind == LocalActionKind.REPLACE
        assert replaced.target == added.written
        assert store.get_item(added.written).status == ItemStatus.STALE
        assert [i.proposition.value for i in store.active_in_slot(CITY_SLOT)] == ["portland"]

    def test_refine(self, store, schema):
        first = local_update(store, self.candidate(schema, 1, LIMITATION, "knee"))
        refined = local_update(store, self.candidate(schema, 2, LIMITATION, "knee_sprain"))
        assert refined.kind == LocalActionKind.REFINE
        assert refined.target == first.written

    def test_retract(self, store, schema):
        added = local_update(store, self.candidate(schema, 1, CITY, "seattle"))
        retracted = local_update(store, self.candidate(schema, 2, CITY, "seattle", polarity=Polarity.DENY))
        assert retracted.kind == LocalActionKind.RETRACT
        stale = store.get_item(added.written)
        assert stale.staled_by.rationale == "explicit negation"
        assert stale.staled_by.rule_id is None

        missing = local_update(store, self.candidate(schema, 3, CITY, "denver", polarity=Polarity.DENY))
        assert missing.kind == LocalActionKind.NO_OP


class TestRevisionCandidates:
    def test_affected_regions_follow_edges(self, schema, store):
        [update] = extract_candidates(session("s1", 1, span(LIMITATION, "knee_sprain")), schema)
        slots = affected_regions(schema, [update])
        assert COMMUTE_SLOT in slots
        assert all(slot.domain in {"routine_and_transport", "current_focus_and_goals"} for slot in slots)

    def test_tags_and_order(self, ingest, store, schema):
        ingest(session(
            "s1", 1,
            span("health_and_mobility/current_health_state", "fully_healthy"),
            span(COMMUTE, "bicycle"),
            span(SKILL, "knee_surgery_research"),
        ))
        [update] = extract_candidates(session("s2", 2, span(LIMITATION, "knee_sprain")), schema)
        candidates = build_revision_candidates(store, [update], schema, k=5)
        tags = {store.get_item(c.item_id).proposition.value: c.tag for c in candidates}
        assert tags == {
            "fully_healthy": CandidateTag.DIRECT,
            "bicycle": CandidateTag.AFFECTED,
            "knee_surgery_research": CandidateTag.GLOBAL,
        }
        assert [c.tag for c in candidates] == [CandidateTag.DIRECT, CandidateTag.AFFECTED, CandidateTag.GLOBAL]
        assert build_revision_candidates(store, [update], schema, k=0)[-1].tag == CandidateTag.AFFECTED

    def test_proposals_name_the_firing_rule(self, ingest, store, schema, knowledge):
        ingest(session("s1", 1, span(COMMUTE, "bicycle"), span(CITY, "seattle")))
        [update] = extract_candidates(session("s2", 2, span(LIMITATION, "knee_sprain")), schema)
        candidates = build_revision_candidates(store, [update], schema, k=5)
        [proposal] = propose_revisions(store, candidates, [update], knowledge, schema)
        assert store.get_item(proposal.old_item).proposition.value == "bicycle"
        assert proposal.triggering_rule == "leg_injury_blocks_active_commute"
        assert proposal.tag == CandidateTag.AFFECTED
        assert proposal.supporting_updates == (update,)

    def test_no_proposal_against_a_later_item(self, ingest, store, schema, knowledge):
        ingest(session("s1", 5, span(COMMUTE, "bicycle")))
        [update] = extract_candidates(session("s0", 2, span(LIMITATION, "knee_sprain")), schema)
        candidates = build_revision_candidates(store, [update], schema, k=5)
        assert candidates
        assert propose_revisions(store, candidates, [update], knowledge, schema) == []


class TestIngest:
    def test_type_ii_dependency_sets_marker(self, ingest, store):
        ingest(session("s1", 1, span(COMMUTE, "bicycle")))
        [report] = ingest(session("s2", 40, span(LIMITATION, "knee_sprain")))
        [decision] = report.decisions
        assert decision.decision.verdict == Verdict.UNKNOWN
        assert decision.triggering_rule == "leg_injury_blocks_active_commute"
        assert report.markers_set == (COMMUTE_SLOT,)
        old = store.get_item(decision.old_item)
        assert old.staled_by.session_id == "s2"
        assert old.staled_by.rule_id == "leg_injury_blocks_active_commute"

    def test_implied_value_replaces(self, ingest, store):
        ingest(session("s1", 1, span(COMMUTE, "driving")))
        [report] = ingest(session("s2", 40, span(WORK_CHANGE, "remote_job")))
        [decision] = report.decisions
        assert decision.decision.verdict == Verdict.REPLACE
        [current] = store.active_in_slot(COMMUTE_SLOT)
        assert current.proposition.value == "no_commute"
        assert current.provenance.source_kind == SourceKind.INFERRED
        assert current.evidence[0].session_id == "s2"
        assert report.markers_set == ()

    def test_incompat_same_slot_stales(self, ingest, store):
        ingest(session("s1", 1, span(ADJUSTMENT, "marathon_training")))
        [report] = ingest(session("s2", 40, span(ADJUSTMENT, "doctor_ordered_rest")))
        [decision] = report.decisions
        assert decision.decision.verdict == Verdict.STALE
        active = store.active_in_slot(SlotRef.model_validate(ADJUSTMENT))
        assert [i.proposition.value for i in active] == ["doctor_ordered_rest"]

    def test_same_session_value_suppresses_marker(self, ingest, store):
        ingest(session("s1", 1, span(ROUTINE, "daily_gym_sessions")))
        [report] = ingest(session("s2", 40, span(CAREGIVING, "caring_for_father"), span(ROUTINE, "morning_walks")))
        [decision] = report.decisions
        assert decision.decision.verdict == Verdict.UNKNOWN
        assert report.markers_set == ()
        assert any("no marker" in note for note in report.notes)
        routine = SlotRef.model_validate(ROUTINE)
        assert [i.proposition.value for i in store.active_in_slot(routine)] == ["morning_walks"]
        assert store.marker_for(routine) is None

    def test_single_slot_replacement_in_the_same_session(self, ingest, store):
        ingest(session("s1", 1, span(CITY, "seattle")))
        [report] = ingest(session("s2", 40, span(WEATHER, "dry_heat"), span(CITY, "phoenix")))
        assert report.decisions == ()
        assert report.markers_set == ()
        assert [i.proposition.value for i in store.active_in_slot(CITY_SLOT)] == ["phoenix"]

    def test_unrelated_session_changes_nothing(self, ingest, store):
        ingest(session("s1", 1, span(CITY, "seattle")))
        before = store.items()
        [report] = ingest(session("s2", 2, span(SKILL, "python_programming")))
        assert report.decisions == ()
        assert store.items()[:1] == before

    def test_out_of_order_session(self, ingest, store):
        ingest(session("s1", 10, span(CITY, "seattle")))
        digest = store.digest()
        with pytest.raises(OutOfOrderSession) as err:
            ingest(session("s0", 5, span(CITY, "portland")))
        assert err.value.session_id == "s0"
        assert store.digest() == digest

    def test_session_without_candidates(self, ingest, store):
        [report] = ingest(session("s1", 1))
        assert report.candidates_extracted == 0
        assert store.items() == []

    def test_every_accepted_session_advances_the_clock(self, ingest, store):
        ingest(session("s1", 1, span(CITY, "seattle")))
        before = store.snapshot()
        [empty] = ingest(session("s2", 5))
        assert empty.candidates_extracted == 0
        assert store.snapshot().items == before.items
        assert store.snapshot().markers == before.markers
        assert store.clock == at(5)

        [repeat] = ingest(session("s3", 9, span(CITY, "seattle")))
        assert [a.kind for a in repeat.local_actions] == [LocalActionKind.NO_OP]
        assert store.clock == at(9)

        with pytest.raises(OutOfOrderSession):
            ingest(session("s4", 7, span(CITY, "portland")))
        assert store.clock == at(9)

    def test_adjudicator_failure_rolls_back_the_session(self, store, knowledge):
        class Exploding(Adjudicator):
            def decide(self, context):
                raise RuntimeError("judge crashed")

        ingest_session(store, session("s1", 1, span(COMMUTE, "bicycle")), knowledge, adjudicator=Exploding())
        digest = store.digest()
        with pytest.raises(RuntimeError):
            ingest_session(
                store,
                session("s2", 40, span(LIMITATION, "knee_sprain"), span(SKILL, "python_programming")),
                knowledge,
                adjudicator=Exploding(),
            )
        assert store.digest() == digest
        assert store.clock == at(1)

    def test_replace_into_another_slot_is_downgraded(self, store, knowledge):
        class Confused(Adjudicator):
            def decide(self, context):
                return AdjudicationDecision(
                    verdict=Verdict.REPLACE,
                    replacement=prop(CITY, "denver"),
                    rationale="wrong slot",
                )

        config = IngestConfig()
        ingest_session(store, session("s1", 1, span(COMMUTE, "bicycle")), knowledge, config, Confused())
        report = ingest_session(store, session("s2", 40, span(LIMITATION, "knee_sprain")), knowledge, config, Confused())
        assert report.decisions[0].decision.verdict == Verdict.UNKNOWN
        assert any("another slot" in note for note in report.notes)
        assert store.marker_for(COMMUTE_SLOT) is not None
        assert store.active_in_slot(CITY_SLOT) == []

    def test_keep_verdict_leaves_item_active(self, store, knowledge):
        class Lenient(Adjudicator):
            def decide(self, context):
                return AdjudicationDecision(verdict=Verdict.KEEP, rationale="keep it")

        ingest_session(store, session("s1", 1, span(COMMUTE, "bicycle")), knowledge, adjudicator=Lenient())
        report = ingest_session(store, session("s2", 40, span(LIMITATION, "knee_sprain")), knowledge, adjudicator=Lenient())
        assert report.items_staled == ()
        assert [i.proposition.value for i in store.active_in_slot(COMMUTE_SLOT)] == ["bicycle"]
