import io
import math

import numpy as np
import pytest

from ezaudit.attacks import ez_score, score_traces
from ezaudit.metrics import auc
from ezaudit.synth import SynthConfig, generate, oracle_expected_ez
from ezaudit.trace import read_traces, trace_to_json_line, write_traces


def cfg(**kw):
    base = dict(
        n_members=40,
        n_nonmembers=40,
        errors_per_seq=50,
        g_sigma=1.0,
        mem_mean=0.0,
        seed=123,
    )
    base.update(kw)
    return SynthConfig(**base)


def serialize(config):
    buf = io.StringIO()
    for t in generate(config):
        buf.write(trace_to_json_line(t))
        buf.write("\n")
    return buf.getvalue()


class TestDeterminism:
    def test_same_seed_byte_identical(self):
        assert serialize(cfg()) == serialize(cfg())

    def test_different_seed_differs(self):
        assert serialize(cfg(seed=1)) != serialize(cfg(seed=2))

    def test_file_round_trip_preserves_delta_bits(self, tmp_path):
        path = tmp_path / "s.traces.jsonl"
        traces = list(generate(cfg(n_members=5, n_nonmembers=5)))
        write_traces(traces, path)
        for a, b in zip(traces, read_traces(path)):
            np.testing.assert_array_equal(a.delta, b.delta)


class TestStructure:
    def test_shapes_labels_ids(self):
        traces = list(generate(cfg(n_members=3, n_nonmembers=2, errors_per_seq=7)))
        assert [t.label for t in traces] == ["member"] * 3 + ["nonmember"] * 2
        assert traces[0].id == "mem-000000" and traces[-1].id == "non-000001"
        for t in traces:
            assert len(t) == 7
            assert (t.gt_rank == 2).all()
            assert (t.target_logprob <= 0).all() and (t.ref_logprob <= 0).all()
            assert t.has_vocab_stats() and t.compressed_len >= 1

    def test_emit_flags(self):
        t = next(iter(generate(cfg(emit_vocab_stats=False, emit_compressed_len=False))))
        assert t.vocab_mean is None and t.compressed_len is None

    def test_success_fraction_positions(self):
        config = cfg(errors_per_seq=50, success_fraction=0.5)
        for t in generate(config):
            assert (t.gt_rank == 2).sum() == 50
            assert (t.gt_rank == 1).sum() == 50

    def test_validator_clean(self, tmp_path):
        path = tmp_path / "s.traces.jsonl"
        write_traces(generate(cfg(n_members=10, n_nonmembers=10)), path)
        from ezaudit.trace import validate_traces

        assert validate_traces(path).clean

    def test_config_validation(self):
        with pytest.raises(ValueError):
            cfg(g_sigma=0.0).validated()
        with pytest.raises(ValueError):
            cfg(mem_mean=-1.0).validated()
        with pytest.raises(ValueError):
            cfg(success_fraction=1.0).validated()
        with pytest.raises(ValueError):
            cfg(errors_per_seq=0).validated()


class TestNull:
    def test_null_deltas_same_law(self):
        # mem_mean = 0: pooled member and nonmember deltas are draws from one law
        traces = list(generate(cfg(n_members=150, n_nonmembers=150)))
        m = np.concatenate([t.delta for t in traces if t.label == "member"])
        n = np.concatenate([t.delta for t in traces if t.label == "nonmember"])
        pooled_sd = np.sqrt(np.var(m) / m.size + np.var(n) / n.size)
        assert abs(m.mean() - n.mean()) < 4 * pooled_sd

    def test_null_auc_near_half(self):
        traces = list(generate(cfg(n_members=200, n_nonmembers=200)))
        rows = list(score_traces(traces, ("ez",)))
        ms = [s.score for s, lb in rows if lb == "member"]
        ns = [s.score for s, lb in rows if lb == "nonmember"]
        assert 0.42 <= auc(ms, ns) <= 0.58


class TestSignal:
    def test_strong_signal_regression_pin(self):
        # mem_mean = 5*g_sigma, 1000+1000, 100 errors: observed 1.0 on the
        # first verified run (seed 99), frozen here as the regression target
        config = cfg(
            n_members=1000, n_nonmembers=1000, errors_per_seq=100,
            mem_mean=5.0, seed=99,
            emit_vocab_stats=False, emit_compressed_len=False,
        )
        rows = list(score_traces(generate(config), ("ez",)))
        ms = [s.score for s, lb in rows if lb == "member"]
        ns = [s.score for s, lb in rows if lb == "nonmember"]
        value = auc(ms, ns)
        assert value >= 0.95
        assert value == 1.0

    def test_members_score_higher_with_memorization(self):
        traces = list(generate(cfg(mem_mean=2.0, n_members=150, n_nonmembers=150)))
        rows = list(score_traces(traces, ("ez",)))
        ms = [s.score for s, lb in rows if lb == "member"]
        ns = [s.score for s, lb in rows if lb == "nonmember"]
        assert auc(ms, ns) > 0.9

    def test_joint_scale_invariance_per_sequence(self):
        a = list(generate(cfg(mem_mean=1.5, n_members=30, n_nonmembers=30)))
        b = list(
            generate(cfg(mem_mean=15.0, g_sigma=10.0, n_members=30, n_nonmembers=30))
        )
        for ta, tb in zip(a, b):
            ea, eb = ez_score(ta).ez, ez_score(tb).ez
            if math.isinf(ea) or ea == 0.0:
                assert eb == ea
            else:
                assert eb == pytest.approx(ea, rel=1e-9)


class TestOracle:
    def test_null_group_means_agree(self):
        res = oracle_expected_ez(cfg(errors_per_seq=100), n_sequences=3000)
        tol = 3 * (res.member.std_error + res.nonmember.std_error)
        assert abs(res.member.mean_ez - res.nonmember.mean_ez) <= tol
        assert res.member.n_infinite == 0

    def test_memorization_elevates_mean_ez(self):
        res = oracle_expected_ez(cfg(mem_mean=1.0, errors_per_seq=100), n_sequences=3000)
        gap = res.member.mean_ez - res.nonmember.mean_ez
        assert gap > 3 * (res.member.std_error + res.nonmember.std_error)

    def test_oracle_scale_invariance(self):
        a = oracle_expected_ez(cfg(mem_mean=1.0), n_sequences=500)
        b = oracle_expected_ez(cfg(mem_mean=10.0, g_sigma=10.0), n_sequences=500)
        assert b.member.mean_ez == pytest.approx(a.member.mean_ez, rel=1e-9)
        assert b.nonmember.mean_ez == pytest.approx(a.nonmember.mean_ez, rel=1e-9)
