"""``textweights`` command line: one subcommand per pipeline stage.

Artifacts live under ``paths.workdir``; each command reads what earlier
stages wrote there.  Summaries go to stdout as one JSON object, the config
hash and errors go to stderr (errors as one JSON line, nonzero exit).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, gradcore, store
from .config import ConfigError, config_hash, load_config
from .diffusion import (DenoiserModel, DenoiserShape, WeightDiffusion, gradcheck_case,
                        init_denoiser_params, make_schedule, pad_mask)
from .downstream import (FUSION_COLUMNS, INIT_COLUMNS, EvalConfig, csv_table, enhance, evaluate,
                         fuse_by_text, fusion_baselines, fusion_rows, independent_head,
                         init_compare, markdown_table, meets_thresholds)
from .headtrainer import HeadTrainConfig, HeadWeights, build_dataset, init_head, train_head
from .landscape import TaskLoss, compute_grid, emit_grid, random_direction, trajectory_direction
from .seeding import derive_rng
from .taskgen import ClassUniverse, FileEmbedder, make_task, make_universe, task_condition
from .theory import RESIDUAL_TOLERANCE, decompose
from .weightspace import ParamSchema, chunk_spec, chunk_spec_for_count, to_normalized

GRADCHECK_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-4


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, 2)


# -- run context -----------------------------------------------------------

class Run:
    def __init__(self, cfg: dict, threads: int):
        self.cfg = cfg
        self.threads = threads
        self.hash = config_hash(cfg)
        self.workdir = Path(cfg["paths"]["workdir"])
        self.seed = cfg["universe"]["seed"]

    def path(self, name: str) -> Path:
        return self.workdir / name

    def report(self, name: str) -> Path:
        return self.workdir / "reports" / name

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise CliError("missing-input", f"{p} not found; run the producing command first", 3)
        return p

    def head_config(self) -> HeadTrainConfig:
        h, u = self.cfg["heads"], self.cfg["universe"]
        return HeadTrainConfig(h["hidden_dim"], h["epochs_base"], h["epochs_subtask"],
                               h["learning_rate"], h["batch_size"], h["samples_per_class"],
                               self.cfg["eval"]["test_samples_per_class"],
                               h["base_samples_per_class"], h["activation"], u["noise_scale"],
                               self.seed)

    def eval_config(self) -> EvalConfig:
        e = self.cfg["eval"]
        return EvalConfig(e["test_samples_per_class"], e["tau"], e["tau_test"])

    def estimator(self) -> WeightDiffusion:
        d = self.cfg["diffusion"]
        return WeightDiffusion(
            hidden_dim=self.cfg["heads"]["hidden_dim"], steps=d["steps"],
            beta_start=d["beta_start"], beta_end=d["beta_end"],
            block_size=self.cfg["dataset"]["block_size"], width=d["width"], depth=d["depth"],
            heads=d["heads"], ffn_mult=d["ffn_mult"], final_norm=d["final_norm"],
            lambda_sym=d["lambda_sym"], lambda_adv=d["lambda_adv"],
            learning_rate=d["learning_rate"], disc_learning_rate=d["disc_learning_rate"],
            batch_size=d["batch_size"], epochs=d["epochs"], warmup_epochs=d["warmup_epochs"],
            grad_clip=d["grad_clip"], disc_hidden=tuple(d["disc_hidden"]),
            noise_draws=d["noise_draws"], random_state=self.seed)

    def universe(self) -> ClassUniverse:
        data = json.loads(self.need("universe.json").read_text(encoding="utf-8"))
        return ClassUniverse(tuple(data["names"]), np.asarray(data["anchors"]),
                             np.asarray(data["text_embeddings"]))

    def tasks(self, universe: ClassUniverse) -> dict:
        data = json.loads(self.need("tasks.json").read_text(encoding="utf-8"))
        return {t["task_id"]: (make_task(t["task_id"], t["class_ids"], universe), t["split"])
                for t in data["tasks"]}

    def split_tasks(self, universe, split: str) -> list:
        return [t for t, s in self.tasks(universe).values() if s == split]

    def model(self) -> WeightDiffusion:
        return WeightDiffusion.load(self.need("model.t2wc"))

    def pick_task(self, universe, task_id):
        tasks = self.tasks(universe)
        if task_id is None:
            unseen = [t for t, s in tasks.values() if s == "unseen"]
            return unseen[0]
        if task_id not in tasks:
            raise CliError("bad-argument", f"task id {task_id} not in tasks.json", 2)
        return tasks[task_id][0]

    def write_report(self, stem: str, rows, columns):
        store.write_text(self.report(stem + ".md"), markdown_table(rows, columns))
        store.write_text(self.report(stem + ".csv"), csv_table(rows, columns))


def _schema(run: Run, universe: ClassUniverse) -> ParamSchema:
    return ParamSchema(universe.feature_dim, run.cfg["heads"]["hidden_dim"])


# -- commands --------------------------------------------------------------

def cmd_gen_universe(run: Run, args) -> dict:
    u = run.cfg["universe"]
    embedder = None
    if u["embeddings_file"]:
        path = Path(u["embeddings_file"])
        if not path.is_file():
            raise CliError("missing-input", f"embeddings file {path} not found", 3)
        embedder = FileEmbedder(store.read_embeddings(path))
    universe = make_universe(u["classes"], u["feature_dim"], u["embed_dim"], u["alignment"],
                             u["seed"], embedder)
    store.write_json(run.path("universe.json"), {
        "names": list(universe.names),
        "anchors": universe.anchors.tolist(),
        "text_embeddings": universe.text_embeddings.tolist(),
    })
    return {"classes": len(universe), "feature_dim": universe.feature_dim,
            "embed_dim": universe.embed_dim, "out": str(run.path("universe.json"))}


def cmd_build_dataset(run: Run, args) -> dict:
    universe = run.universe()
    ds = run.cfg["dataset"]
    build = build_dataset(universe, ds["n_tasks"], ds["seen_fraction"], run.head_config(),
                          ds["k_min"], ds["k_max"], ds["block_size"], n_jobs=run.threads,
                          block_count=ds["block_count"] or None)
    store.write_dataset(run.path("dataset-seen.t2w"), build.seen)
    store.write_dataset(run.path("dataset-unseen.t2w"), build.unseen)
    store.write_checkpoint(run.path("base-head.t2wc"), {"kind": "base-head"},
                           {"W1": build.base.W1, "W2": build.base.W2})
    unseen_ids = {r.task_id for r in build.unseen.records}
    store.write_json(run.path("tasks.json"), {"tasks": [
        {"task_id": t.task_id, "class_ids": list(t.class_ids),
         "split": "unseen" if t.task_id in unseen_ids else "seen"} for t in build.tasks]})

    def mean_acc(d):
        return float(np.mean([r.test_accuracy for r in d.records]))
    return {"seen": len(build.seen), "unseen": len(build.unseen),
            "block_size": build.seen.chunks.block_size,
            "block_count": build.seen.chunks.block_count,
            "mean_test_accuracy_seen": mean_acc(build.seen),
            "mean_test_accuracy_unseen": mean_acc(build.unseen)}


def cmd_train_diffusion(run: Run, args) -> dict:
    data = store.read_dataset(run.need("dataset-seen.t2w"))
    est = run.estimator()
    est.fit(data.embeddings_matrix(), data.weights_matrix(), chunks=data.chunks,
            checkpoint_path=run.path("model.t2wc"))
    est.save(run.path("model.t2wc"))
    store.write_text(run.path("loss-curve.csv"), est.loss_curve_csv())
    last = est.state_.curves[-1]
    return {"epochs": est.state_.epoch, "steps": est.state_.step, "loss_diff": last[1],
            "loss_sym": last[2], "loss_total": last[5], "out": str(run.path("model.t2wc"))}


def _read_task_file(path, universe: ClassUniverse) -> list:
    p = Path(path)
    if not p.is_file():
        raise CliError("missing-input", f"task file {p} not found", 3)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError("bad-input", f"{p}: {exc}", 2) from None
    entries = data["tasks"] if isinstance(data, dict) else data
    index = {n: i for i, n in enumerate(universe.names)}
    tasks = []
    for n, e in enumerate(entries):
        try:
            ids = [c if isinstance(c, int) else index[c] for c in e["classes"]]
        except KeyError as exc:
            raise CliError("bad-input", f"{p}: task {n} names unknown class {exc}", 2) from None
        tasks.append(make_task(int(e.get("task_id", n)), ids, universe))
    if not tasks:
        raise CliError("bad-input", f"{p}: no tasks", 2)
    return tasks


def cmd_sample(run: Run, args) -> dict:
    universe = run.universe()
    est = run.model()
    if args.task_file:
        tasks = _read_task_file(args.task_file, universe)
    else:
        tasks = run.split_tasks(universe, "unseen")
    cond = np.stack([task_condition(t, universe).vector for t in tasks])
    seed = run.cfg["eval"]["sample_seed"]
    W = est.sample(cond, random_state=seed)
    out = Path(args.out) if args.out else run.path("samples.t2wc")
    schema = _schema(run, universe)
    store.write_checkpoint(out, {"kind": "generated-weights", "feature_dim": schema.feature_dim,
                                 "hidden_dim": schema.hidden_dim, "sample_seed": seed,
                                 "tasks": [{"task_id": t.task_id, "class_ids": list(t.class_ids)}
                                           for t in tasks]},
                           {"weights": W})
    return {"samples": len(tasks), "out": str(out)}


def cmd_eval(run: Run, args) -> dict:
    universe = run.universe()
    path = Path(args.weights) if args.weights else run.need("samples.t2wc")
    if not path.is_file():
        raise CliError("missing-input", f"{path} not found", 3)
    header, tensors = store.read_checkpoint(path)
    if header.get("kind") != "generated-weights":
        raise CliError("bad-input", f"{path} does not hold generated weights", 2)
    hc, ec = run.head_config(), run.eval_config()
    schema = _schema(run, universe)
    if header["feature_dim"] != schema.feature_dim or header["hidden_dim"] != schema.hidden_dim:
        raise CliError("bad-input", f"{path} weights do not match the configured head shape", 2)
    known = {}
    for name in ("dataset-seen.t2w", "dataset-unseen.t2w"):
        if run.path(name).exists():
            split = name.split("-")[1].split(".")[0]
            for r in store.read_dataset(run.path(name)).records:
                known[(r.task_id, r.class_ids)] = (r.test_accuracy, split)
    rows = []
    for w, t in zip(tensors["weights"], header["tasks"]):
        task = make_task(t["task_id"], t["class_ids"], universe)
        acc, _ = evaluate(w, task, universe, hc, eval_config=ec)
        rand = init_head("xavier-uniform", schema, derive_rng(run.seed, "eval-random", task.task_id))
        rand_acc, _ = evaluate(rand, task, universe, hc, eval_config=ec)
        direct, split = known.get((task.task_id, task.class_ids), (None, "external"))
        rows.append({"task_id": task.task_id, "k": task.k, "split": split, "accuracy": acc,
                     "chance": 1.0 / task.k, "random_init": rand_acc,
                     "direct": direct if direct is not None else float("nan"),
                     "meets_tau": meets_thresholds(acc, ec, seen=split == "seen")})
    summary = {"tasks": len(rows),
               "mean_accuracy": float(np.mean([r["accuracy"] for r in rows])),
               "mean_chance": float(np.mean([r["chance"] for r in rows])),
               "mean_random_init": float(np.mean([r["random_init"] for r in rows]))}
    directs = [r["direct"] for r in rows if not np.isnan(r["direct"])]
    if directs:
        summary["mean_direct"] = float(np.mean(directs))
    summary["meets_tau"] = all(r["meets_tau"] for r in rows)
    stem = f"eval-{path.stem}"
    store.write_json(run.report(stem + ".json"), {"config_hash": run.hash, "summary": summary,
                                               "rows": [{k: (None if isinstance(v, float) and np.isnan(v) else v)
                                                         for k, v in r.items()} for r in rows]})
    run.write_report(stem, rows, ("task_id", "k", "split", "accuracy", "chance", "random_init",
                                    "direct"))
    return summary


def cmd_init_compare(run: Run, args) -> dict:
    universe = run.universe()
    task = run.pick_task(universe, args.task_id)
    e = run.cfg["eval"]
    model = run.model() if "t2w" in e["init_methods"] else None
    rows = init_compare(task, universe, e["init_methods"], run.head_config(), model,
                        e["init_epochs"], e["init_learning_rate"], e["sample_seed"])
    run.write_report("init-compare", rows, INIT_COLUMNS)
    return {"task_id": task.task_id,
            "accuracy": {r["method"]: r["accuracy"] for r in rows}}


def disjoint_pairs(tasks, n_pairs: int) -> list:
    """First ``n_pairs`` task pairs (in list order) with no shared class, each task used once."""
    used, pairs = set(), []
    for i, a in enumerate(tasks):
        if a.task_id in used:
            continue
        for b in tasks[i + 1:]:
            if b.task_id in used or set(a.class_ids) & set(b.class_ids):
                continue
            pairs.append((a, b))
            used.update((a.task_id, b.task_id))
            break
        if len(pairs) == n_pairs:
            break
    return pairs


def cmd_fuse(run: Run, args) -> dict:
    universe = run.universe()
    hc = run.head_config()
    model = run.model()
    n = run.cfg["eval"]["fusion_pairs"]
    pool = run.split_tasks(universe, "unseen") + run.split_tasks(universe, "seen")
    pairs = disjoint_pairs(pool, n)
    if len(pairs) < n:
        raise CliError("bad-input", f"only {len(pairs)} disjoint task pairs available, need {n}")
    results, wins = [], 0
    for a, b in pairs:
        res = [fuse_by_text(a, b, universe, model, hc, run.cfg["eval"]["sample_seed"])]
        res += fusion_baselines(a, b, universe, independent_head(a, universe, hc),
                                independent_head(b, universe, hc), hc)
        wins += res[0].average > res[1].average
        results.append((f"{a.task_id}+{b.task_id}", res))
    run.write_report("fusion", fusion_rows(results), FUSION_COLUMNS)
    return {"pairs": len(pairs), "text_beats_interpolation": int(wins)}


def cmd_enhance(run: Run, args) -> dict:
    universe = run.universe()
    model = run.model()
    e = run.cfg["eval"]
    tasks = run.split_tasks(universe, "unseen")[:e["enhance_tasks"]]
    rows = []
    for t in tasks:
        before, after = enhance(t, universe, model, run.head_config(), e["enhance_fraction"],
                                random_state=e["sample_seed"])
        rows.append({"task_id": t.task_id, "before": before, "after": after,
                     "improved": after > before})
    run.write_report("enhance", rows, ("task_id", "before", "after", "improved"))
    return {"tasks": len(rows), "improved": sum(r["improved"] for r in rows)}


def cmd_landscape(run: Run, args) -> dict:
    universe = run.universe()
    task = run.pick_task(universe, args.task_id)
    hc = run.head_config()
    ls = run.cfg["landscape"]
    start, _ = train_head(task, universe, None, hc, epochs=0)
    final, _ = train_head(task, universe, None, hc)
    theta0, theta = start.flat().values, final.flat().values
    d1 = trajectory_direction(theta0, theta)
    d2 = random_direction(derive_rng(run.seed, "landscape-direction", task.task_id),
                          _schema(run, universe), d1)
    loss = TaskLoss(task, universe, hc, ls["split"])
    grid = compute_grid(theta, d1, d2, loss, tuple(ls["alpha_range"]), tuple(ls["beta_range"]),
                        ls["resolution"], cache_dir=run.path("cache"))
    out = run.report(f"landscape.{ls['format']}")
    emit_grid(grid, out, ls["format"])
    return {"task_id": task.task_id, "baseline": grid.baseline, "loss_evaluations": loss.calls,
            "min": float(grid.Z.min()), "max": float(grid.Z.max()), "out": str(out)}


def cmd_verify_theory(run: Run, args) -> dict:
    e, d, ds = run.cfg["eval"], run.cfg["diffusion"], run.cfg["dataset"]
    F, r = run.cfg["universe"]["feature_dim"], run.cfg["heads"]["hidden_dim"]
    E = run.cfg["universe"]["embed_dim"]
    schema = ParamSchema(F, r)
    if args.trained:
        est = run.model()
        data = store.read_dataset(run.need("dataset-seen.t2w"))
        rows = to_normalized(data.weights_matrix(), est.chunks_)
        conds = data.embeddings_matrix()
        spec, schedule = est.chunks_, est.schedule_
    else:
        spec = (chunk_spec_for_count(schema.d, ds["block_count"]) if ds["block_count"]
                else chunk_spec(schema.d, ds["block_size"]))
        schedule = make_schedule(d["steps"], d["beta_start"], d["beta_end"])
    shape = DenoiserShape(spec.block_size, spec.block_count, E, d["width"], d["depth"],
                          d["heads"], d["ffn_mult"], d["final_norm"])
    mask = pad_mask(spec)
    B = e["theory_batch"]
    draws = []
    for i in range(e["theory_draws"]):
        rng = derive_rng(run.seed, "theory", i)
        if args.trained:
            model = est.denoiser_
            pick = rng.choice(rows.shape[0], size=min(B, rows.shape[0]), replace=False)
            theta0, cond = rows[pick], conds[pick]
        else:
            model = DenoiserModel(shape, init_denoiser_params(shape, rng))
            theta0 = rng.uniform(-1.0, 1.0, (B, spec.padded_dim)) * mask
            cond = rng.standard_normal((B, E))
        draws.append(decompose(theta0, cond, schedule, model, rng, schema, mask=mask).as_dict())
    worst = max(x["residual"] for x in draws)
    report = {"config_hash": run.hash, "draws": draws, "max_residual": worst,
              "tolerance": RESIDUAL_TOLERANCE, "passed": worst <= RESIDUAL_TOLERANCE,
              "bound_satisfied": sum(x["bound_satisfied"] for x in draws),
              "model": "trained" if args.trained else "random-init"}
    store.write_json(run.report("theory.json"), report)
    if not report["passed"]:
        raise CliError("check-failed", f"decomposition residual {worst:.3e} exceeds "
                                       f"{RESIDUAL_TOLERANCE:.0e}")
    return {k: report[k] for k in ("max_residual", "tolerance", "passed", "bound_satisfied",
                                    "model")} | {"draws": len(draws)}


def cmd_gradcheck(run: Run, args) -> dict:
    e = run.cfg["eval"]
    cases = args.cases if args.cases is not None else e["gradcheck_cases"]
    worst, where = 0.0, None
    for seed in range(cases):
        graph, feed, names = gradcheck_case(run.seed + seed)
        rep = gradcore.finite_diff_check(graph, feed, GRADCHECK_STEP, GRADCHECK_TOLERANCE,
                                         wrt=names, coords_per_input=e["gradcheck_coords"],
                                         rng=derive_rng(run.seed, "gradcheck-coords", seed))
        if rep.max_rel_error >= worst:
            worst, where = rep.max_rel_error, {"case": seed, "input": rep.worst_input,
                                               "index": list(rep.worst_index or ())}
    report = {"config_hash": run.hash, "cases": cases, "max_rel_error": worst,
              "tolerance": GRADCHECK_TOLERANCE, "step": GRADCHECK_STEP,
              "passed": worst < GRADCHECK_TOLERANCE, "worst": where}
    store.write_json(run.report("gradcheck.json"), report)
    if not report["passed"]:
        raise CliError("check-failed", f"max relative error {worst:.3e} at {where}")
    return {k: report[k] for k in ("cases", "max_rel_error", "tolerance", "passed")}


COMMANDS = {
    "gen-universe": (cmd_gen_universe, "sample the class universe and its text embeddings"),
    "build-dataset": (cmd_build_dataset, "train the base head and one head per task"),
    "train-diffusion": (cmd_train_diffusion, "fit the diffusion model on seen-task weights"),
    "sample": (cmd_sample, "generate head weights for tasks from their descriptions"),
    "eval": (cmd_eval, "score generated weights on each task's test split"),
    "init-compare": (cmd_init_compare, "compare generated vs standard initializations"),
    "fuse": (cmd_fuse, "text fusion vs interpolation on disjoint task pairs"),
    "enhance": (cmd_enhance, "partially denoise under-trained heads"),
    "landscape": (cmd_landscape, "2D loss slice around a trained head"),
    "verify-theory": (cmd_verify_theory, "check the augmentation-loss decomposition"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the miniature denoiser"),
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="TOML run config (built-in desk defaults when omitted)")
    common.add_argument("--threads", type=int, default=1, metavar="N",
                        help="cap on worker processes and BLAS threads (default 1)")
    parser = _Parser(prog="textweights", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "sample":
            p.add_argument("--task-file", metavar="PATH",
                           help="JSON list of {task_id, classes} (default: unseen tasks)")
            p.add_argument("--out", metavar="PATH", help="output weights file")
        elif name == "eval":
            p.add_argument("weights", nargs="?", help="generated weights file "
                                                      "(default: samples.t2wc in the workdir)")
        elif name in ("init-compare", "landscape"):
            p.add_argument("--task-id", type=int, help="task to use (default: first unseen)")
        elif name == "verify-theory":
            p.add_argument("--trained", action="store_true",
                           help="use the trained model and seen data instead of random models")
        elif name == "gradcheck":
            p.add_argument("--cases", type=int, help="number of seeded cases")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise CliError("usage", "--threads must be >= 1", 2)
        cfg = load_config(args.config)
    except CliError as exc:
        return _fail(exc.kind, exc, exc.code)
    except ConfigError as exc:
        return _fail("config", exc, 2)
    run = Run(cfg, args.threads)
    print(f"config-hash {run.hash}", file=sys.stderr)
    handler = COMMANDS[args.command][0]
    try:
        with threadpool_limits(limits=args.threads):
            summary = handler(run, args)
    except CliError as exc:
        return _fail(exc.kind, exc, exc.code)
    except (store.FormatError, ConfigError) as exc:
        return _fail("bad-input", exc, 2)
    except (ValueError, RuntimeError, KeyError, OSError, FloatingPointError) as exc:
        return _fail(type(exc).__name__, exc, 1)
    print(json.dumps(dict(summary, config_hash=run.hash), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
