"""Command-line interface: ``pvn <subcommand> [--config PATH] [--profile desk|paper] [--seed N] [--out DIR]``.

Every subcommand writes line-delimited JSON next to a PNG figure in ``--out``.
Exit codes: 0 success, 1 usage error, 2 runtime failure (including a bound
violation in ``verify-bound``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

log = logging.getLogger("pvn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


# -- shared helpers ---------------------------------------------------------------------------


def _config(args):
    from .config import load_config

    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, args.profile, overrides)


def _out(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _write_lines(path, lines):
    with open(path, "w") as fh:
        for line in lines:
            fh.write(line if line.endswith("\n") else line + "\n")


def _save_model(path, params, cfg):
    from .tensorcore import save_tensors

    save_tensors(path, params.state())
    with open(path + ".json", "w") as fh:
        json.dump({"fingerprint": cfg.fingerprint(), "profile": cfg.profile}, fh)


def _load_model(path, params, cfg):
    from .tensorcore import load_tensors

    if not os.path.exists(path):
        raise FileNotFoundError(f"{path} not found; run the training subcommand first")
    params.load(load_tensors(path))
    meta = path + ".json"
    if os.path.exists(meta):
        with open(meta) as fh:
            fp = json.load(fh).get("fingerprint")
        if fp != cfg.fingerprint():
            log.warning("%s was trained under config %s, current config is %s", path, fp, cfg.fingerprint())


def _vocab(cfg):
    from .taskgen import Vocabulary

    return Vocabulary.build(cfg.n_obj)


def _alignments(cfg, train):
    from .taskgen import extract_alignments

    return extract_alignments(train, cfg.t_pmi, cfg.t_tau)


def _plot_curve(path, records, key, xkey, title):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = [r[xkey] for r in records]
    for k in key:
        ys = [r.get(k) for r in records]
        if any(y is not None for y in ys):
            ax.plot(xs, ys, marker="o", label=k)
    ax.set_xlabel(xkey)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# -- subcommands ----------------------------------------------------------------------------------


def cmd_gen(args, cfg):
    from .evalcli import suites
    from .simworld import format_environment
    from .taskgen import task_to_record

    out = _out(args)
    train, test = suites(cfg, _vocab(cfg))
    env_dir = os.path.join(out, "envs")
    os.makedirs(env_dir, exist_ok=True)
    for name, suite in (("train", train), ("test", test)):
        lines = []
        for t in suite:
            with open(os.path.join(env_dir, f"{t.env_id}.env"), "w") as fh:
                fh.write(format_environment(t.landmarks))
            lines.append(json.dumps(task_to_record(t, f"{t.env_id}.env")))
        _write_lines(os.path.join(out, f"tasks_{name}.jsonl"), lines)
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, suite in (("train", train), ("test", test)):
        ax.hist([float(np.linalg.norm(t.goal - np.array(t.start.position))) for t in suite], bins=20, alpha=0.6,
                label=name)
    ax.set_xlabel("start-goal distance (m)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(out, "tasks.png"), dpi=100)
    plt.close(fig)
    print(f"wrote {len(train)} train and {len(test)} test tasks to {out}")
    return 0


def cmd_align(args, cfg):
    from .evalcli import suites

    out = _out(args)
    train, _ = suites(cfg, _vocab(cfg))
    table = _alignments(cfg, train)
    vocab = _vocab(cfg)
    with open(os.path.join(out, "alignments.jsonl"), "w") as fh:
        for (o, t), v in sorted(table.pairs.items()):
            fh.write(json.dumps({"class": int(o), "token": int(t), "word": vocab.itos[t], "pmi": v}) + "\n")
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(list(table.pairs.values()), bins=30)
    ax.set_xlabel("PMI of kept word/object pairs")
    fig.tight_layout()
    fig.savefig(os.path.join(out, "alignments.png"), dpi=100)
    plt.close(fig)
    print(f"{len(table.pairs)} word/object pairs above T_PMI={cfg.t_pmi}")
    return 0


def train_stage1_run(cfg, out, train, epochs=None):
    from .trainer import MetricsLog, prepare_stage1_task, train_stage1
    from .visitnet import Stage1Model

    vocab = _vocab(cfg)
    table = _alignments(cfg, train)
    t0 = time.time()
    prepared = [prepare_stage1_task(t, cfg, table) for t in train]
    log.info("stage 1: prepared %d tasks in %.1fs", len(prepared), time.time() - t0)
    model = Stage1Model(cfg, len(vocab.itos), seed=cfg.seed)
    mlog = MetricsLog(os.path.join(out, "stage1_metrics.jsonl"))
    train_stage1(model, prepared, cfg, epochs, mlog,
                 progress=lambda e, n: log.debug("stage 1 epoch %d: %d examples", e, n))
    _save_model(os.path.join(out, "stage1.ckpt"), model.params, cfg)
    _plot_curve(os.path.join(out, "stage1_loss.png"), mlog.records, ["loss", "kl", "percept", "ground", "lang"],
                "epoch", "stage 1 training loss")
    return model, mlog


def train_stage2_run(cfg, out, train, iterations=None):
    from .controller import Stage2Model
    from .trainer import MetricsLog, train_stage2_daggerfm

    model = Stage2Model(cfg, seed=cfg.seed)
    mlog = MetricsLog(os.path.join(out, "stage2_metrics.jsonl"))
    dev = train[: cfg.n_dev]
    train_stage2_daggerfm(model, train, cfg, iterations, mlog, dev_tasks=dev)
    _save_model(os.path.join(out, "stage2.ckpt"), model.params, cfg)
    _plot_curve(os.path.join(out, "stage2_loss.png"), mlog.records, ["loss", "dev_sr"], "iteration",
                "stage 2 DAggerFM")
    return model, mlog


def cmd_train_stage1(args, cfg):
    from .evalcli import suites

    out = _out(args)
    train, _ = suites(cfg, _vocab(cfg))
    _, mlog = train_stage1_run(cfg, out, train, args.epochs)
    print(json.dumps(mlog.records[-1]) if mlog.records else "no epochs run")
    return 0


def cmd_train_stage2(args, cfg):
    from .evalcli import suites

    out = _out(args)
    train, _ = suites(cfg, _vocab(cfg))
    _, mlog = train_stage2_run(cfg, out, train, args.iterations)
    print(json.dumps(mlog.records[-1]) if mlog.records else "no iterations run")
    return 0


def make_policy(name, cfg, out, train=None):
    from . import evalcli as ev
    from .controller import Stage2Model
    from .visitnet import Stage1Model

    if name == "stop":
        return ev.StopPolicy()
    if name == "oracle":
        return ev.OracleAgent(cfg)
    if name == "average":
        steps, v = ev.average_constants(train, cfg) if train is not None else ev.PAPER_AVERAGE
        log.info("average baseline: ours (%d steps, %.3f m/s), paper %s", steps, v, ev.PAPER_AVERAGE)
        pol = ev.AveragePolicy(steps, v)
        pol.constants = {"steps": steps, "v": v, "paper_steps": ev.PAPER_AVERAGE[0], "paper_v": ev.PAPER_AVERAGE[1]}
        return pol
    if name == "ideal-act-expert":
        return ev.ExpertIdealAct(cfg)
    s1 = Stage1Model(cfg, len(_vocab(cfg).itos))
    _load_model(os.path.join(out, "stage1.ckpt"), s1.params, cfg)
    s2 = Stage2Model(cfg)
    _load_model(os.path.join(out, "stage2.ckpt"), s2.params, cfg)
    if name == "pvn":
        return ev.PVNAgent(s1, s2, cfg)
    if name == "no-instruction":
        return ev.PVNAgent(s1, s2, cfg, blind=True)
    if name == "ideal-act":
        return ev.IdealActAgent(s1, s2, cfg)
    raise UsageError(f"unknown policy {name!r}")


def eval_run(policy, tasks, cfg, out):
    from .evalcli import evaluate

    report, results = evaluate(policy, tasks, cfg)
    stem = os.path.join(out, f"eval_{policy.name}")
    _write_lines(stem + ".jsonl", [r.to_json() for r in results])
    rec = json.loads(report.to_json())
    rec.update(getattr(policy, "constants", {}))
    with open(stem + "_report.json", "w") as fh:
        json.dump(rec, fh, sort_keys=True)
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist([r.distance for r in results], bins=25)
    ax.axvline(cfg.success_radius, color="k", ls="--", label=f"success radius {cfg.success_radius} m")
    ax.set_xlabel("stopping distance (m)")
    ax.set_title(report.summary(), fontsize=8)
    ax.legend()
    fig.tight_layout()
    fig.savefig(stem + ".png", dpi=100)
    plt.close(fig)
    return report, results


def cmd_eval(args, cfg):
    from .evalcli import suites

    out = _out(args)
    train, test = suites(cfg, _vocab(cfg))
    if args.limit:
        test = test[: args.limit]
    policy = make_policy(args.policy, cfg, out, train)
    report, _ = eval_run(policy, test, cfg, out)
    print(report.summary())
    return 0


def cmd_verify_bound(args, cfg):
    from .mdpbound import verify

    out = _out(args)
    lines = []
    t0 = time.time()
    summary = verify(args.trials, args.seed if args.seed is not None else 7, args.corners, sink=lines.append)
    _write_lines(os.path.join(out, "bound_trials.jsonl"), lines)
    rec = dict(vars(summary), passed=summary.passed, seconds=round(time.time() - t0, 2))
    with open(os.path.join(out, "bound_summary.json"), "w") as fh:
        json.dump(rec, fh, sort_keys=True, default=float)
    ratios, cratios = [], []
    for line in lines:
        r = json.loads(line)
        if r["rhs"] is not None and r["rhs"] > 0:
            ratios.append(r["lhs"] / r["rhs"])
            cratios.append(r["lhs"] / r["corrected_rhs"])
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist([ratios, cratios], bins=40, label=["stated bound", "with 2H*alpha term"])
    ax.axvline(1.0, color="k", ls="--")
    ax.set_xlabel("lhs / rhs")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(out, "bound_ratio.png"), dpi=100)
    plt.close(fig)
    print(f"{summary.trials} trials, {summary.finite} with finite eps/eta: {summary.violations} violations "
          f"(mu reading {summary.mu_violations}, corrected bound {summary.corrected_violations}); "
          f"max value mismatch {summary.max_value_error:.2e}")
    return 0 if summary.passed else 2


def cmd_render(args, cfg):
    from .evalcli import overlay_image, run_episode, suites, topdown_truth
    from .simworld import write_ppm

    out = _out(args)
    train, test = suites(cfg, _vocab(cfg))
    policy = make_policy(args.policy, cfg, out, train)
    paths = []
    for task in test[: args.episodes]:
        res = run_episode(policy, task, cfg)
        pair = getattr(policy, "last_pair", None)
        frame = policy.predictor.frame if hasattr(policy, "predictor") else None
        if frame is None:
            from .mapper import MapFrame
            from .trainer import task_expert

            frame = MapFrame.from_pose(task.start, cfg.map_size, cfg.map_extent)
            pair = task_expert(task, frame, cfg.sigma_cells)
        img = overlay_image(pair, frame, topdown_truth(task, frame), task.path, res.trajectory)
        p = os.path.join(out, f"overlay_{policy.name}_{task.task_id}.ppm")
        write_ppm(p, img)
        paths.append(p)
    print("\n".join(paths))
    return 0


def cmd_benchmark(args, cfg):
    """Train both stages, then evaluate every policy on the held-out suite."""
    from .evalcli import suites

    out = _out(args)
    t0 = time.time()
    train, test = suites(cfg, _vocab(cfg))
    if not args.skip_train:
        train_stage1_run(cfg, out, train)
        log.info("stage 1 done at %.0fs", time.time() - t0)
        train_stage2_run(cfg, out, train)
        log.info("stage 2 done at %.0fs", time.time() - t0)
    t_train = time.time() - t0
    rows = []
    for name in args.policies.split(","):
        pol = make_policy(name, cfg, out, train)
        report, _ = eval_run(pol, test, cfg, out)
        rec = json.loads(report.to_json())
        rec.update(getattr(pol, "constants", {}))
        rows.append(rec)
        print(report.summary(), flush=True)
    total = time.time() - t0
    rows.append({"policy": "_timing", "train_seconds": round(t_train, 1), "total_seconds": round(total, 1)})
    _write_lines(os.path.join(out, "benchmark.jsonl"), [json.dumps(r, sort_keys=True) for r in rows])
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 3.2))
    names = [r["policy"] for r in rows[:-1]]
    ax.bar(names, [r["sr"] for r in rows[:-1]])
    ax.set_ylabel("success rate (%)")
    ax.set_ylim(0, 100)
    plt.setp(ax.get_xticklabels(), rotation=20, ha="right")
    fig.tight_layout()
    fig.savefig(os.path.join(out, "benchmark.png"), dpi=100)
    plt.close(fig)
    print(f"train {t_train:.0f}s, total {total:.0f}s")
    return 0


POLICIES = ("pvn", "stop", "average", "oracle", "ideal-act", "no-instruction", "ideal-act-expert")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--profile", default="desk", choices=("desk", "paper"))
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="runs/desk", metavar="DIR")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="pvn", description="Position visitation networks on a synthetic benchmark.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", parents=[common], help="generate environments and task suites")
    sub.add_parser("align", parents=[common], help="extract PMI word/object alignments")
    s = sub.add_parser("train-stage1", parents=[common], help="supervised visitation prediction")
    s.add_argument("--epochs", type=int)
    s = sub.add_parser("train-stage2", parents=[common], help="DAggerFM control learning")
    s.add_argument("--iterations", type=int)
    s = sub.add_parser("eval", parents=[common], help="evaluate a policy on the held-out suite")
    s.add_argument("--policy", required=True, choices=POLICIES)
    s.add_argument("--limit", type=int, default=0)
    s = sub.add_parser("verify-bound", parents=[common], help="randomized check of the visitation bound")
    s.add_argument("--trials", type=int, default=10000)
    s.add_argument("--corners", type=int, default=100)
    s = sub.add_parser("render", parents=[common], help="top-down overlays of evaluated episodes")
    s.add_argument("--policy", default="pvn", choices=POLICIES)
    s.add_argument("--episodes", type=int, default=4)
    s = sub.add_parser("benchmark", parents=[common], help="train both stages and evaluate all policies")
    s.add_argument("--policies", default="stop,average,oracle,pvn,ideal-act,no-instruction")
    s.add_argument("--skip-train", action="store_true")
    return p


COMMANDS = {
    "gen": cmd_gen,
    "align": cmd_align,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "eval": cmd_eval,
    "verify-bound": cmd_verify_bound,
    "render": cmd_render,
    "benchmark": cmd_benchmark,
}


def main(argv=None):
    from .config import ConfigError

    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
        cfg = _config(args)
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if not e.code else 1
    try:
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - surface any runtime failure as exit 2
        log.error("%s failed: %s: %s", args.command, type(e).__name__, e)
        if args.verbose:
            raise
        return 2


if __name__ == "__main__":
    sys.exit(main())
