import json
import math

import pytest

from ezaudit.cli import main
from ezaudit.trace import write_traces

from conftest import trace_from_delta


def run(argv):
    return main([str(a) for a in argv])


def synth_file(tmp_path, name="s.traces.jsonl", **overrides):
    args = {
        "--members": 30,
        "--nonmembers": 30,
        "--errors-per-seq": 40,
        "--g-sigma": 1.0,
        "--mem-mean": 2.0,
        "--seed": 11,
    }
    args.update(overrides)
    path = tmp_path / name
    argv = ["synth", "-o", path]
    for k, v in args.items():
        argv += [k, v]
    assert run(argv) == 0
    return path


class TestValidate:
    def test_clean_file_exit_zero(self, tmp_path, capsys):
        path = synth_file(tmp_path)
        assert run(["validate", path]) == 0
        out = capsys.readouterr().out
        assert "sequences: 60" in out and "violations: 0" in out

    def test_violation_exit_one(self, tmp_path, capsys):
        bad = '{"id": "x", "label": "member", "tokens": [{"tl": -1.0, "rl": -1.0, "rank": 0}]}'
        path = tmp_path / "bad.jsonl"
        path.write_text(bad + "\n")
        assert run(["validate", path]) == 1
        assert "gt_rank" in capsys.readouterr().out

    def test_missing_file_exit_two(self, tmp_path):
        assert run(["validate", tmp_path / "nope.jsonl"]) == 2

    def test_parse_failure_exit_two(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("{broken\n")
        assert run(["validate", path]) == 2


class TestSynth:
    def test_same_seed_identical_files(self, tmp_path):
        a = synth_file(tmp_path, "a.jsonl")
        b = synth_file(tmp_path, "b.jsonl")
        assert a.read_bytes() == b.read_bytes()
        meta = json.loads((tmp_path / "a.jsonl.meta.json").read_text())
        assert meta["config"]["seed"] == 11

    def test_bad_config_exit_two(self, tmp_path):
        assert run(
            ["synth", "-o", tmp_path / "x.jsonl", "--members", 5, "--nonmembers", 5,
             "--g-sigma", -1.0]
        ) == 2


class TestScore:
    def test_rows_and_manifest(self, tmp_path):
        traces = synth_file(tmp_path)
        out = tmp_path / "scores.csv"
        assert run(["score", "-t", traces, "-o", out, "--attacks", "ez,loss,refl"]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "id,attack,score,label"
        assert len(lines) == 1 + 60 * 3
        manifest = json.loads((tmp_path / "scores.csv.manifest.json").read_text())
        assert manifest["params"]["attacks"] == ["ez", "loss", "refl"]
        assert str(traces) in manifest["inputs"]
        assert manifest["backend"] in ("numba", "numpy")

    def test_no_manifest_flag(self, tmp_path):
        traces = synth_file(tmp_path)
        out = tmp_path / "scores.csv"
        assert run(["score", "-t", traces, "-o", out, "--no-manifest"]) == 0
        assert not (tmp_path / "scores.csv.manifest.json").exists()

    def test_unsupported_attack_fully_fails(self, tmp_path, capsys):
        path = tmp_path / "nostats.jsonl"
        assert run(
            ["synth", "-o", path, "--members", 5, "--nonmembers", 5,
             "--no-vocab-stats", "--seed", 3]
        ) == 0
        out = tmp_path / "scores.csv"
        assert run(["score", "-t", path, "-o", out, "--attacks", "minkpp"]) == 1
        assert "vocab_mean" in capsys.readouterr().err

    def test_partial_failure_keeps_other_attacks(self, tmp_path):
        path = tmp_path / "mixed.jsonl"
        ts = [
            trace_from_delta("a", "member", [0.1], compressed_len=10),
            trace_from_delta("b", "nonmember", [0.2]),
        ]
        write_traces(ts, path)
        out = tmp_path / "scores.csv"
        assert run(["score", "-t", path, "-o", out, "--attacks", "zlib,loss"]) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 1 + 3  # zlib only for 'a', loss for both

    def test_unknown_attack_exit_two(self, tmp_path):
        traces = synth_file(tmp_path)
        assert run(["score", "-t", traces, "-o", tmp_path / "s.csv",
                    "--attacks", "bogus"]) == 2

    def test_top_k_changes_scores_and_manifest(self, tmp_path):
        path = tmp_path / "t.jsonl"
        write_traces(
            [
                trace_from_delta("a", "member", [0.5, -0.2, 0.1], ranks=[2, 6, 1]),
                trace_from_delta("b", "nonmember", [0.5, -0.2, 0.1], ranks=[3, 2, 1]),
            ],
            path,
        )
        out1, out5 = tmp_path / "s1.csv", tmp_path / "s5.csv"
        assert run(["score", "-t", path, "-o", out1, "--attacks", "ez"]) == 0
        assert run(["score", "-t", path, "-o", out5, "--attacks", "ez", "--top-k", 5]) == 0
        assert out1.read_text() != out5.read_text()
        m = json.loads((tmp_path / "s5.csv.manifest.json").read_text())
        assert m["params"]["top_k"] == 5

    def test_threads_byte_identical(self, tmp_path):
        traces = synth_file(tmp_path)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert run(["score", "-t", traces, "-o", a, "--threads", 1]) == 0
        assert run(["score", "-t", traces, "-o", b, "--threads", 8]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_env_threads_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("EZ_AUDIT_THREADS", "3")
        traces = synth_file(tmp_path)
        out = tmp_path / "env.csv"
        assert run(["score", "-t", traces, "-o", out]) == 0


class TestEval:
    def pipeline(self, tmp_path, **synth_kw):
        traces = synth_file(tmp_path, **synth_kw)
        scores = tmp_path / "scores.csv"
        assert run(["score", "-t", traces, "-o", scores]) == 0
        return scores

    def test_report_shape_and_composability(self, tmp_path):
        scores = self.pipeline(tmp_path)
        out = tmp_path / "report.json"
        assert run(["eval", "-s", scores, "-o", out, "--resamples", 50, "--seed", 4]) == 0
        report = json.loads(out.read_text())
        assert report["levels"] == [0.01, 0.001]
        attacks = {a["attack"] for a in report["attacks"]}
        assert attacks == {"ez", "loss", "refl"}
        entry = report["attacks"][0]
        assert entry["counts"] == {"members": 30, "nonmembers": 30}
        assert entry["bootstrap"]["rng"] == "pcg64-seedsequence(seed, resample_index)"

    def test_fixed_seed_byte_identical(self, tmp_path):
        scores = self.pipeline(tmp_path)
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        for out in (a, b):
            assert run(["eval", "-s", scores, "-o", out, "--resamples", 64,
                        "--seed", 9, "--no-manifest"]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_threads_byte_identical(self, tmp_path):
        scores = self.pipeline(tmp_path)
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert run(["eval", "-s", scores, "-o", a, "--resamples", 64, "--threads", 1]) == 0
        assert run(["eval", "-s", scores, "-o", b, "--resamples", 64, "--threads", 8]) == 0
        assert json.loads(a.read_text())["attacks"] == json.loads(b.read_text())["attacks"]

    def test_three_levels(self, tmp_path):
        scores = self.pipeline(tmp_path)
        out = tmp_path / "r.json"
        assert run(["eval", "-s", scores, "-o", out, "--levels", "0.1,0.01,0.001",
                    "--resamples", 20]) == 0
        report = json.loads(out.read_text())
        assert [t["level"] for t in report["attacks"][0]["tpr_at"]] == [0.1, 0.01, 0.001]

    def test_perfect_scores(self, tmp_path):
        path = tmp_path / "perfect.csv"
        rows = ["id,attack,score,label"]
        for i in range(20):
            rows.append(f"m{i},ez,{100 + i},member")
            rows.append(f"n{i},ez,{float(i)},nonmember")
        path.write_text("\n".join(rows) + "\n")
        out = tmp_path / "r.json"
        assert run(["eval", "-s", path, "-o", out, "--resamples", 30]) == 0
        report = json.loads(out.read_text())["attacks"][0]
        assert report["auc"] == 1.0
        assert all(t["tpr"] == 1.0 for t in report["tpr_at"])

    def test_roc_csv_dump(self, tmp_path):
        scores = self.pipeline(tmp_path)
        out = tmp_path / "r.json"
        assert run(["eval", "-s", scores, "-o", out, "--resamples", 10,
                    "--roc-csv", str(tmp_path / "roc-")]) == 0
        roc_file = tmp_path / "roc-ez.roc.csv"
        lines = roc_file.read_text().splitlines()
        assert lines[0] == "threshold,fpr,tpr"
        assert lines[1].startswith("inf,0.0,0.0")

    def test_bad_level_exit_two(self, tmp_path):
        scores = self.pipeline(tmp_path)
        assert run(["eval", "-s", scores, "-o", tmp_path / "r.json",
                    "--levels", "1.5"]) == 2


class TestEvalErrors:
    def test_single_label_attack(self, tmp_path, capsys):
        path = tmp_path / "scores.csv"
        path.write_text(
            "id,attack,score,label\n"
            "a,ez,1.0,member\nb,ez,0.0,nonmember\n"
            "a,zlib,1.0,member\n"
        )
        out = tmp_path / "r.json"
        assert run(["eval", "-s", path, "-o", out, "--resamples", 5]) == 0
        report = json.loads(out.read_text())
        entries = {a["attack"]: a for a in report["attacks"]}
        assert "error" in entries["zlib"] and "auc" in entries["ez"]

    def test_all_fail_exit_one(self, tmp_path):
        path = tmp_path / "scores.csv"
        path.write_text("id,attack,score,label\na,ez,1.0,member\n")
        assert run(["eval", "-s", path, "-o", tmp_path / "r.json",
                    "--resamples", 5]) == 1


class TestAblate:
    def test_report_structure(self, tmp_path):
        traces = synth_file(tmp_path, **{"--success-fraction": 0.5})
        out = tmp_path / "ablate.json"
        assert run(["ablate", "-t", traces, "-o", out]) == 0
        report = json.loads(out.read_text())
        assert set(report["auc_by_top_k"]) == {"1", "5", "10"}
        assert set(report["auc_by_top_k"]["1"]) == {
            "ez", "log_ratio", "p_minus_n", "pos_fraction", "median_delta", "mean_delta"
        }
        fracs = [report["error_fraction_by_top_k"][k] for k in ("1", "5", "10")]
        assert fracs[0] >= fracs[1] >= fracs[2]
        assert "success_zone_auc" in report
        assert "ez|pos_fraction" in report["rank_correlation_top1"]

    def test_strong_signal_regression_pins(self, tmp_path):
        # observed on the first verified run and frozen (seed 2024, 150+150
        # sequences, 30 error positions, 50% success fraction, mem_mean 1.0)
        traces = tmp_path / "pin.jsonl"
        assert run(["synth", "-o", traces, "--members", 150, "--nonmembers", 150,
                    "--errors-per-seq", 30, "--g-sigma", 1.0, "--mem-mean", 1.0,
                    "--seed", 2024, "--success-fraction", 0.5, "--no-manifest"]) == 0
        out = tmp_path / "pin.json"
        assert run(["ablate", "-t", traces, "-o", out]) == 0
        report = json.loads(out.read_text())
        assert report["auc_by_top_k"]["1"]["ez"] == pytest.approx(
            0.9990666666666667, abs=1e-12
        )
        assert report["success_zone_auc"] == pytest.approx(0.8282666666666667, abs=1e-12)
        # error-position EZ dominates the success zone, and the odds/fraction
        # forms rank identically
        assert report["auc_by_top_k"]["1"]["ez"] >= report["success_zone_auc"]
        assert report["rank_correlation_top1"]["ez|pos_fraction"] == 1.0
        # synthetic ranks are only 1/2, so top-5/10 zones are empty: every
        # sequence hits the zero-error convention and the AUC collapses to 0.5
        assert all(v == 0.5 for v in report["auc_by_top_k"]["5"].values())
        assert (tmp_path / "pin.json.manifest.json").exists()

    def test_all_zero_deltas_auc_half(self, tmp_path):
        path = tmp_path / "zero.jsonl"
        ts = [
            trace_from_delta(f"m{i}", "member", [0.0] * 10) for i in range(10)
        ] + [
            trace_from_delta(f"n{i}", "nonmember", [0.0] * 10) for i in range(10)
        ]
        write_traces(ts, path)
        out = tmp_path / "a.json"
        assert run(["ablate", "-t", path, "-o", out]) == 0
        report = json.loads(out.read_text())
        for k, table in report["auc_by_top_k"].items():
            for attack, value in table.items():
                assert value == 0.5, (k, attack)

    def test_single_label_exit_one(self, tmp_path):
        path = tmp_path / "one.jsonl"
        write_traces([trace_from_delta("a", "member", [0.1])], path)
        assert run(["ablate", "-t", path, "-o", tmp_path / "a.json"]) == 1


class TestAnalyze:
    def prepared(self, tmp_path):
        traces = synth_file(tmp_path, **{"--success-fraction": 0.2})
        scores = tmp_path / "scores.csv"
        assert run(["score", "-t", traces, "-o", scores, "--attacks", "ez"]) == 0
        return traces, scores

    def test_failure_table_shape(self, tmp_path):
        traces, scores = self.prepared(tmp_path)
        out = tmp_path / "fail.json"
        assert run(["analyze", "failure", "-t", traces, "-s", scores,
                    "--fpr", 0.10, "-o", out]) == 0
        report = json.loads(out.read_text())
        names = [g["group"] for g in report["groups"]]
        assert names == ["all_members", "false_negatives", "all_nonmembers", "false_positives"]
        for g in report["groups"]:
            assert set(g) == {"group", "n", "avg_tokens", "avg_errors", "mean_delta"}
        assert report["fpr_level"] == 0.10

    def test_bins_delta_means_shape(self, tmp_path):
        traces, _ = self.prepared(tmp_path)
        out = tmp_path / "bins.json"
        assert run(["analyze", "bins", "-t", traces, "--n", 5,
                    "--mode", "delta-means", "-o", out]) == 0
        report = json.loads(out.read_text())
        assert report["n_bins"] == 5 and len(report["bins"]) == 5
        # memorization skews member perplexity, so edge bins may be single-label
        assert any("mean_member_delta" in b for b in report["bins"])
        for b in report["bins"]:
            assert "mean_member_delta" in b or b.get("flag")

    def test_bins_auc_with_csv(self, tmp_path):
        traces, scores = self.prepared(tmp_path)
        out = tmp_path / "bins.json"
        inter = tmp_path / "inter.csv"
        assert run(["analyze", "bins", "-t", traces, "-s", scores, "--mode", "auc",
                    "-o", out, "--csv", inter]) == 0
        report = json.loads(out.read_text())
        assert report["attack"] == "ez"
        assert len(report["bins"]) == 4
        lines = inter.read_text().splitlines()
        assert lines[0].startswith("id,label,perplexity")
        assert len(lines) == 1 + 60

    def test_bins_auc_requires_scores(self, tmp_path):
        traces, _ = self.prepared(tmp_path)
        assert run(["analyze", "bins", "-t", traces, "--mode", "auc",
                    "-o", tmp_path / "x.json"]) == 2

    def test_errors_and_ks(self, tmp_path):
        traces, _ = self.prepared(tmp_path)
        out1, out2 = tmp_path / "err.json", tmp_path / "ks.json"
        assert run(["analyze", "errors", "-t", traces, "-o", out1]) == 0
        report = json.loads(out1.read_text())
        assert "point_biserial_r" in report and "members" in report
        assert run(["analyze", "ks", "-t", traces, "-o", out2]) == 0
        report = json.loads(out2.read_text())
        assert "ks_statistic" in report and len(report["quantiles"]) == 5
        # file-writing analyses get manifest sidecars too
        assert (tmp_path / "err.json.manifest.json").exists()
        assert (tmp_path / "ks.json.manifest.json").exists()

    def test_stdout_when_no_out(self, tmp_path, capsys):
        traces, _ = self.prepared(tmp_path)
        assert run(["analyze", "errors", "-t", traces]) == 0
        assert "point_biserial_r" in capsys.readouterr().out

    def test_attack_selection_required_when_ambiguous(self, tmp_path, capsys):
        traces = synth_file(tmp_path)
        scores = tmp_path / "two.csv"
        assert run(["score", "-t", traces, "-o", scores, "--attacks", "ez,loss"]) == 0
        assert run(["analyze", "failure", "-t", traces, "-s", scores,
                    "--fpr", 0.1, "-o", tmp_path / "f.json"]) == 1
        assert "--attack" in capsys.readouterr().err
        assert run(["analyze", "failure", "-t", traces, "-s", scores, "--attack", "ez",
                    "--fpr", 0.1, "-o", tmp_path / "f.json"]) == 0


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
