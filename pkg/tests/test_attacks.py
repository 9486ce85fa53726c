# tests/test_attacks.py
import pytest

from lib.actions import ActionType
from lib.attacks import SCENARIOS, UnknownScenarioError, get_scenario, make_injector, run_attack
from lib.monitor import replay_packets
from lib.verifier import Classification
from tests.conftest import FIXED_KEY

EMISSION = [name for name, s in sorted(SCENARIOS.items()) if s.layer == "emission"]
TRANSPORT = [name for name, s in sorted(SCENARIOS.items()) if s.layer == "transport"]


def detect(model, run):
    return replay_packets(model, run.key, run.packets)


class TestDetectionMatrix:
    def test_every_scenario_is_listed(self):
        assert len(SCENARIOS) == 7
        assert len(EMISSION) == 3 and len(TRANSPORT) == 4

    @pytest.mark.parametrize("name", sorted(SCENARIOS))
    def test_scenario_is_detected_with_its_class(self, corpus, model_of, name):
        run = run_attack(name, corpus("attack_target"), key=FIXED_KEY)
        assert run.fired
        pipeline = detect(model_of("attack_target"), run)
        assert not pipeline.trusted
        assert pipeline.classification is run.expected

    def test_clean_run_of_the_same_target_is_trusted(self, corpus, model_of, run_pipeline):
        _, results, pipeline = run_pipeline(corpus("attack_target"), model_of("attack_target"))
        assert pipeline.trusted
        assert all(r.ok for r in results[1])


class TestEmissionLayer:
    def test_rop_gadget(self, corpus, model_of):
        run = run_attack("rop-install", corpus("attack_target"), key=FIXED_KEY)
        report = detect(model_of("attack_target"), run).reports[0]
        assert report.classification is Classification.UNKNOWN_EDGE
        assert report.action.atype is ActionType.E
        assert report.action.src == 0x401010
        assert report.action.value == 0x401008
        assert report.thread_id == 1

    def test_stack_overwrite_picks_another_return_site(self, corpus, model_of):
        run = run_attack("stack-overwrite", corpus("attack_target"), key=FIXED_KEY)
        report = detect(model_of("attack_target"), run).reports[0]
        assert report.classification is Classification.SHADOW_STACK_VIOLATION
        assert report.action.value == 0x403025
        assert "0x403005" in report.detail

    def test_backdoor_corrupts_the_context(self, corpus, model_of):
        run = run_attack("backdoor-activation", corpus("attack_target"), key=FIXED_KEY)
        generated = [e.action.value for e in run.transcript if e.action.atype is ActionType.G]
        consumed = [e.action.value for e in run.transcript if e.action.atype is ActionType.C]
        assert consumed[0] == generated[0] ^ 1
        report = detect(model_of("attack_target"), run).reports[0]
        assert report.action.atype is ActionType.C

    def test_detection_happens_at_the_injected_action(self, corpus, model_of):
        run = run_attack("rop-install", corpus("attack_target"), key=FIXED_KEY)
        position = next(i for i, e in enumerate(run.transcript) if e.action.value == 0x401008)
        pipeline = detect(model_of("attack_target"), run)
        assert pipeline.verifier.thread(1).actions == position + 1

    def test_only_the_attacked_thread_turns_untrusted(self, corpus, model_of):
        run = run_attack("rop-install", corpus("attack_target"), key=FIXED_KEY, threads=2)
        pipeline = detect(model_of("attack_target"), run)
        assert [s.verdict for s in pipeline.verifier.snapshot()] == ["untrusted", "trusted"]

    def test_scenario_without_an_injection_point(self, corpus, model_of):
        run = run_attack("backdoor-activation", corpus("plain_ecall"), key=FIXED_KEY)
        assert not run.fired
        assert detect(model_of("plain_ecall"), run).trusted


class TestTransportLayer:
    @pytest.mark.parametrize("name", TRANSPORT)
    def test_every_thread_seen_is_untrusted(self, corpus, model_of, name):
        run = run_attack(name, corpus("attack_target"), key=FIXED_KEY)
        pipeline = detect(model_of("attack_target"), run)
        assert all(r.classification is Classification.PROTOCOL_TAMPER for r in pipeline.reports)
        assert pipeline.reports
        assert pipeline.channel.untrusted_reason == "mac-mismatch at packet 4"

    def test_drop_shortens_the_stream(self, corpus):
        clean = run_attack("wire-tamper", corpus("attack_target"), key=FIXED_KEY, packet=10**6)
        dropped = run_attack("wire-drop", corpus("attack_target"), key=FIXED_KEY)
        assert not clean.fired
        assert len(dropped.packets) == len(clean.packets) - 1

    def test_replay_lengthens_the_stream(self, corpus):
        replayed = run_attack("wire-replay", corpus("attack_target"), key=FIXED_KEY)
        assert replayed.packets[3] == replayed.packets[1]

    def test_later_packet_index(self, corpus, model_of):
        run = run_attack("wire-tamper", corpus("attack_target"), key=FIXED_KEY, packet=9, byte=40, bit=7)
        pipeline = detect(model_of("attack_target"), run)
        assert pipeline.verifier.thread(1).actions == 9


class TestScenarioLookup:
    def test_unknown_name(self, corpus):
        with pytest.raises(UnknownScenarioError):
            get_scenario("heap-spray")
        with pytest.raises(UnknownScenarioError):
            run_attack("heap-spray", corpus("attack_target"))

    def test_parameters_override_defaults(self, corpus):
        injector = make_injector("wire-tamper", corpus("attack_target"), packet=5)
        assert injector.scenario.params == {"packet": 5, "byte": 0, "bit": 0}
        assert get_scenario("wire-tamper").params["packet"] == 3

    def test_random_key_by_default(self, corpus):
        run = run_attack("wire-drop", corpus("attack_target"))
        assert len(run.key) == 48
        assert run.key != FIXED_KEY
