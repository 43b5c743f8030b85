"""Acceptance gate: one verdict line per criterion, printed at the end of the run.

Property suites (1, 2, 3, 5) re-run the relevant unit tests in a fresh process so their
wall time is measured in isolation. The end-to-end benchmark (6) reuses ``runs/desk`` when
it holds a finished benchmark for the current desk fingerprint; set PVN_FRESH_BENCHMARK=1
to retrain from scratch (about 40 minutes on one core).
"""
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import pytest

from acceptance_log import record
from pvn import cli
from pvn.config import load_profile

ROOT = Path(__file__).resolve().parents[1]


def _pytest(*selection):
    t0 = time.time()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *selection],
                          cwd=ROOT, capture_output=True, text=True)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    return proc.returncode == 0, time.time() - t0, tail


def test_criterion_1_gradient_suite():
    ok, secs, tail = _pytest(
        "tests/test_tensorcore.py::test_op_gradient_fd", "tests/test_tensorcore.py::test_composite_gradient",
        "tests/test_tensorcore.py::test_deconv_gradient", "tests/test_tensorcore.py::test_lstm_gradient",
        "tests/test_mapper.py::test_cnn_gradient_fd", "tests/test_mapper.py::test_front_half_gradient_fd",
        "tests/test_visitnet.py::test_lingunet_kl_gradient_fd",
        "tests/test_visitnet.py::test_embedding_and_grounding_gradient_fd",
        "tests/test_visitnet.py::test_aux_heads_gradient_fd",
        "tests/test_controller.py::test_act_gradient_fd",
    )
    passed = ok and secs < 120
    record(1, passed, f"FD rel err < 1e-4, >= 20 instances per op/network; {tail}; {secs:.0f}s (limit 120s)")
    assert passed, tail


def test_criterion_2_distribution_suite():
    ok, secs, tail = _pytest(
        "tests/test_tensorcore.py::test_softmax_uniform", "tests/test_tensorcore.py::test_softmax_shift_invariance",
        "tests/test_tensorcore.py::test_softmax_is_distribution",
        "tests/test_visitnet.py::test_softmax_channels_always_distributions",
        "tests/test_trainer.py::test_expert_sums_and_goal_argmax_1000_cases",
        "tests/test_trainer.py::test_single_point_expert_is_normalized_gaussian",
        "tests/test_trainer.py::test_rotated_distributions_sum_to_one_1000_cases",
        "tests/test_controller.py::test_impulse_mass_conserved_inside_crop",
    )
    record(2, ok, f"softmax, expert and rotated distributions normalized, goal argmax exact; {tail}; {secs:.0f}s")
    assert ok, tail


def test_criterion_3_geometry_suite():
    ok, secs, tail = _pytest(
        "tests/test_simworld.py::test_ground_pixel_roundtrip", "tests/test_simworld.py::test_nonsky_pixels_reproject",
        "tests/test_simworld.py::test_exact_arc_vs_substepped", "tests/test_simworld.py::test_step_quarter_arc_matches_euler",
        "tests/test_mapper.py::test_impulse_lands_within_half_cell", "tests/test_mapper.py::test_cell_roundtrip",
    )
    passed = ok and secs < 60
    record(3, passed, f"pixel/ground round trip, impulse projection, exact arc; {tail}; {secs:.0f}s (limit 60s)")
    assert passed, tail


def test_criterion_4_bound_verifier(tmp_path, capsys):
    t0 = time.time()
    code = cli.main(["verify-bound", "--trials", "10000", "--corners", "100", "--seed", "7", "--out", str(tmp_path)])
    secs = time.time() - t0
    s = json.loads((tmp_path / "bound_summary.json").read_text())
    passed = s["violations"] == 0 and s["max_value_error"] < 1e-9 and secs < 300
    record(4, passed,
           f"{s['violations']} violations of the stated bound over {s['finite']} finite trials "
           f"(corrected bound: {s['corrected_violations']}); value agreement {s['max_value_error']:.1e}; "
           f"{secs:.0f}s (limit 300s); exit code {code}")
    assert s["corrected_violations"] == 0 and s["max_value_error"] < 1e-9
    assert passed, "stated bound violated; see the counterexample in mdpbound.counterexample()"


def test_criterion_5_pmi_planted():
    ok, secs, tail = _pytest("tests/test_taskgen.py::test_planted_precision_recall")
    record(5, ok, f"planted corpus of 500 tasks, precision = recall = 1.0; {tail}")
    assert ok, tail


# -- end-to-end benchmark ---------------------------------------------------------------------


def _benchmark_rows():
    desk = load_profile("desk")
    out = ROOT / "runs" / "desk"
    path = out / "benchmark.jsonl"
    fresh = os.environ.get("PVN_FRESH_BENCHMARK") == "1"
    if fresh or not path.exists() or not _matches(path, desk.fingerprint()):
        out.mkdir(parents=True, exist_ok=True)
        assert cli.main(["benchmark", "--out", str(out)]) == 0
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    return {r["policy"]: r for r in rows}


def _matches(path, fingerprint):
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    return all(r.get("fingerprint") == fingerprint for r in rows if r["policy"] != "_timing")


@pytest.mark.slow
def test_criterion_6_desk_benchmark():
    rows = _benchmark_rows()
    sr = {k: v["sr"] for k, v in rows.items() if k != "_timing"}
    total = rows["_timing"]["total_seconds"]
    checks = {
        "PVN >= 50": sr["pvn"] >= 50.0,
        "PVN >= 2x Average": sr["pvn"] >= 2 * sr["average"],
        "Stop <= 10": sr["stop"] <= 10.0,
        "Oracle = 100": sr["oracle"] == 100.0,
        "ideal-Act >= PVN": sr["ideal-act"] >= sr["pvn"],
        "no-instruction <= PVN - 15": sr["no-instruction"] <= sr["pvn"] - 15.0,
        "wall time <= 45 min": total <= 45 * 60,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = ", ".join(f"{k} {v:.1f}" for k, v in sr.items()) + f"; total {total / 60:.1f} min"
    record(6, not failed, detail + (f"; failing: {', '.join(failed)}" if failed else ""))
    assert not failed, detail


# -- reproducibility ----------------------------------------------------------------------------

TINY = ["--set", "n_train=6", "--set", "n_test=4", "--set", "n_dev=2", "--set", "stage1_epochs=1",
        "--set", "dagger_iterations=2", "--set", "dagger_envs_per_iter=2",
        "--seed", "5"]


def _pipeline(out):
    for cmd in (["train-stage1"], ["train-stage2"], ["eval", "--policy", "pvn"]):
        assert cli.main([*cmd, "--out", str(out), *TINY]) == 0
    return (out / "eval_pvn_report.json").read_bytes()


def test_criterion_7_reproducibility(tmp_path, capsys):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    same_report = a == b
    same_ckpt = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                    for f in ("stage1.ckpt", "stage2.ckpt"))
    same_episodes = (tmp_path / "a" / "eval_pvn.jsonl").read_bytes() == (tmp_path / "b" / "eval_pvn.jsonl").read_bytes()
    ok, _, tail = _pytest("tests/test_evalcli.py::test_checkpoint_round_trip_identical_outputs",
                          "tests/test_tensorcore.py::test_checkpoint_roundtrip")
    passed = same_report and same_ckpt and same_episodes and ok
    record(7, passed, f"identical reports {same_report}, checkpoints {same_ckpt}, episodes {same_episodes}, "
                      f"checkpoint round trip {ok} ({tail})")
    assert passed
