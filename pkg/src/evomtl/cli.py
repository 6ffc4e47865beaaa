"""Command-line entry points.

Commands: run (execute an experiment end to end), report (history files
to CSV), export-dot (module/routing topology to DOT), worker (start an
evaluation worker), eval-test (test-split evaluation of a routing
checkpoint). Exit codes: 0 ok, 1 runtime failure, 2 usage error.

Runs are launched and then inspected offline from the run directory,
which is self-describing: resolved config, input content hash, split
manifest, history log, checkpoints, and the final report.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from .config import ALGORITHMS, ExperimentConfig, resolve_config
from .coevolve import (
    GenerationPlan, HyperPopulation, retrain_top, run_generation_loop,
)
from .dataset import write_split_manifest
from .dot import module_dot, routing_dot
from .errors import ConfigError, EvoMtlError
from .genome import (
    GlobalHyper, LayerGene, MutationRates, genome_from_obj,
    init_blueprint_population, init_module_population,
)
from .harness import build_dataset, distributed_evaluator, local_evaluator, \
    run_worker
from .routing import (
    default_ctr_modules, evaluate_individual, restore_ctr_state, run_ctr,
)
from .serialize import atomic_write_text, canon_dumps, canon_loads
from .training import evaluate_accuracy, train_network


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except EvoMtlError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evomtl",
        description="Evolutionary architecture search for multitask networks")
    sub = parser.add_subparsers(required=True)

    run_p = sub.add_parser("run", help="run an experiment end to end")
    run_p.add_argument("--algorithm", required=True, choices=ALGORITHMS)
    run_p.add_argument("--config", help="JSON config file (flat keys)")
    run_p.add_argument("--profile", choices=("desk", "paper"))
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--out", help="run directory (default runs/<alg>-s<seed>)")
    run_p.add_argument("--synth", metavar="TxCxS",
                       help="synthetic corpus: tasks x classes x image side")
    run_p.add_argument("--noise", type=float, dest="synth_noise")
    run_p.add_argument("--synth-seed", type=int, dest="synth_seed")
    run_p.add_argument("--data-dir", dest="data_dir")
    run_p.add_argument("--image-side", type=int, dest="image_side")
    run_p.add_argument("--plan-only", action="store_true",
                       help="echo the resolved plan and exit")
    run_p.add_argument("--serve", metavar="HOST:PORT",
                       help="coordinate remote workers instead of local eval")
    for flag, key, typ in [
            ("--networks-per-gen", "networks_per_generation", int),
            ("--train-iters", "train_iters", int),
            ("--generations", "max_generations", int),
            ("--stagnation", "stagnation_limit", int),
            ("--n-top", "n_top", int),
            ("--long-iters", "long_iters", int),
            ("--modules", "modules", int),
            ("--species", "species", int),
            ("--blueprints", "blueprints", int),
            ("--meta-iters", "meta_iters", int),
            ("--m-iters", "m_iters", int),
            ("--retrain-meta-iters", "retrain_meta_iters", int),
            ("--alpha", "alpha", float),
            ("--k-modules", "k_modules", int),
            ("--depth", "depth", int),
            ("--filters", "filters", int),
            ("--lr", "lr", float),
            ("--sharing-mode", "sharing_mode", str),
            ("--eval-subsample", "eval_subsample", int)]:
        run_p.add_argument(flag, dest=key, type=typ)
    run_p.set_defaults(func=cmd_run)

    rep_p = sub.add_parser("report", help="history logs to CSV on stdout")
    rep_p.add_argument("histories", nargs="+")
    rep_p.set_defaults(func=cmd_report)

    dot_p = sub.add_parser("export-dot", help="emit DOT for a checkpoint")
    dot_p.add_argument("--checkpoint", required=True)
    grp = dot_p.add_mutually_exclusive_group(required=True)
    grp.add_argument("--module", type=int, help="module index to export")
    grp.add_argument("--routing", help="task id whose routing to export")
    dot_p.set_defaults(func=cmd_export_dot)

    w_p = sub.add_parser("worker", help="start an evaluation worker")
    w_p.add_argument("--addr", help="coordinator HOST:PORT "
                                    "(default $EVOMTL_COORDINATOR_ADDR)")
    w_p.set_defaults(func=cmd_worker)

    ev_p = sub.add_parser("eval-test",
                          help="evaluate a routing checkpoint on the test split")
    ev_p.add_argument("--checkpoint", required=True)
    ev_p.set_defaults(func=cmd_eval_test)
    return parser


def _overrides_from_args(args) -> dict:
    keys = ["profile", "seed", "out", "data_dir", "image_side", "synth_noise",
            "synth_seed", "networks_per_generation", "train_iters",
            "max_generations", "stagnation_limit", "n_top", "long_iters",
            "modules", "species", "blueprints", "meta_iters", "m_iters",
            "retrain_meta_iters", "alpha", "k_modules", "depth", "filters",
            "lr", "sharing_mode", "eval_subsample", "serve"]
    over = {k: getattr(args, k, None) for k in keys}
    over["algorithm"] = args.algorithm
    if args.synth:
        try:
            t, c, s = (int(x) for x in args.synth.lower().split("x"))
        except ValueError:
            raise ConfigError(f"--synth wants TxCxS, got {args.synth!r}")
        over.update(synth_tasks=t, synth_classes=c, synth_side=s)
    if args.plan_only:
        over["plan_only"] = True
    return over


def _echo_plan(cfg: ExperimentConfig) -> None:
    n_mod, n_sp = cfg.module_counts()
    lines = [f"algorithm={cfg.algorithm} profile={cfg.profile} seed={cfg.seed}"]
    if cfg.algorithm in ("cm", "cmsr", "cmtr"):
        lines.append(f"modules={n_mod} species={n_sp}"
                     + (f" blueprints={cfg.blueprints}"
                        if cfg.algorithm == "cmsr" else ""))
        lines.append(f"networks_per_generation={cfg.networks_per_generation} "
                     f"train_iters={cfg.train_iters} "
                     f"stagnation_limit={cfg.stagnation_limit} "
                     f"max_generations={cfg.max_generations}")
    if cfg.algorithm in ("ctr", "cmtr"):
        lines.append(f"meta_iters={cfg.meta_iters} m_iters={cfg.m_iters} "
                     f"alpha={cfg.alpha} k_modules={cfg.k_modules}")
    ref = cfg.dataset_ref()
    lines.append(f"dataset={canon_dumps(ref)}")
    for line in lines:
        print(line)


def _hash_inputs(cfg: ExperimentConfig) -> str:
    h = hashlib.sha256(canon_dumps(cfg.to_obj()).encode())
    if cfg.data_dir and os.path.isdir(cfg.data_dir):
        for root, dirs, files in sorted(os.walk(cfg.data_dir)):
            dirs.sort()
            for f in sorted(files):
                path = os.path.join(root, f)
                h.update(path.encode())
                h.update(str(os.path.getsize(path)).encode())
    return h.hexdigest()


def _default_genes(cfg: ExperimentConfig) -> list[LayerGene]:
    side = cfg.effective_image_side()
    kernel = 3 if side >= 3 else 1
    return [LayerGene(2 + i, "conv2d", "relu", kernel, cfg.filters, 1e-6, 0.0)
            for i in range(cfg.depth)]


def _write_history(path: str, records: list[dict]) -> None:
    atomic_write_text(path, "".join(canon_dumps(r) + "\n" for r in records))


def cmd_run(args) -> int:
    cfg = resolve_config(profile=args.profile, config_file=args.config,
                         overrides=_overrides_from_args(args))
    _echo_plan(cfg)
    if cfg.plan_only:
        return 0
    out_dir = cfg.out or os.path.join("runs", f"{cfg.algorithm}-s{cfg.seed}")
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "config.json"),
                      canon_dumps(cfg.to_obj()) + "\n")
    atomic_write_text(os.path.join(out_dir, "inputs_hash.txt"),
                      _hash_inputs(cfg) + "\n")
    spec = build_dataset(cfg.dataset_ref())
    write_split_manifest(spec, os.path.join(out_dir, "split_manifest.txt"))

    if cfg.algorithm in ("baseline-single", "baseline-soft"):
        report = _run_baseline(cfg, spec, out_dir)
    elif cfg.algorithm == "ctr":
        report = _run_ctr_experiment(cfg, spec, out_dir)
    else:
        report = _run_coevolution(cfg, out_dir)
    atomic_write_text(os.path.join(out_dir, "report.json"),
                      canon_dumps(report) + "\n")
    _print_report(report)
    print(f"run artifacts in {out_dir}")
    return 0


def _print_report(report: dict) -> None:
    for tid in sorted(report.get("val_per_task", {})):
        val = report["val_per_task"][tid]
        test = report.get("test_per_task", {}).get(tid)
        line = f"task {tid}: val {val:.4f}"
        if test is not None:
            line += f" test {test:.4f}"
        print(line)
    if "val_accuracy" in report:
        print(f"mean validation accuracy: {report['val_accuracy']:.4f}")
    if "test_accuracy" in report:
        print(f"mean test accuracy: {report['test_accuracy']:.4f}")
    if "param_count" in report:
        print(f"parameters (distinct storages): {report['param_count']}")


def _run_baseline(cfg: ExperimentConfig, spec, out_dir: str) -> dict:
    from .assembly import (
        assemble_single_task, assemble_soft_ordering, count_parameters,
    )
    rng = np.random.default_rng(cfg.seed)
    genes = _default_genes(cfg)
    hyper = GlobalHyper(final_layer_filters=cfg.filters, weight_init="he",
                        sharing_mode=cfg.sharing_mode)
    tids = [t.task_id for t in spec.tasks]
    cls = [t.class_count for t in spec.tasks]
    assemble = (assemble_soft_ordering if cfg.algorithm == "baseline-soft"
                else assemble_single_task)
    net = assemble(genes, tids, cls, spec.image_side, hyper, rng)
    epoch = max(1, sum(len(t.split.train) for t in spec.tasks)
                // max(1, len(spec.tasks)))
    train_network(net, spec, cfg.train_iters, cfg.lr, rng,
                  snapshot_every=max(1, min(epoch, cfg.train_iters // 4 or 1)))
    val_per_task, val_mean = evaluate_accuracy(net, spec, "val")
    spec.unlock_test()
    test_per_task, test_mean = evaluate_accuracy(net, spec, "test")
    history = [{"generation": 1, "best_fitness": val_mean,
                "mean_fitness": val_mean, "best_genome_id": 0}]
    _write_history(os.path.join(out_dir, "history.jsonl"), history)
    return {"algorithm": cfg.algorithm, "val_per_task": val_per_task,
            "val_accuracy": val_mean, "test_per_task": test_per_task,
            "test_accuracy": test_mean, "param_count": count_parameters(net)}


def _run_ctr_experiment(cfg: ExperimentConfig, spec, out_dir: str) -> dict:
    rng = np.random.default_rng(cfg.seed)
    modules = default_ctr_modules(cfg.k_modules, spec.image_side, rng,
                                  cfg.filters)
    ckpt_path = os.path.join(out_dir, "ctr_checkpoint.json")
    final, best, history = run_ctr(
        modules, spec, cfg.meta_iters, cfg.m_iters, cfg.alpha, cfg.lr, rng,
        checkpoint_path=ckpt_path, eval_subsample=cfg.eval_subsample)
    _write_history(os.path.join(out_dir, "history.jsonl"), history)
    # record the dataset next to the weights so eval-test can rebuild it
    ckpt = canon_loads(open(ckpt_path).read())
    ckpt["dataset"] = cfg.dataset_ref()
    atomic_write_text(ckpt_path, canon_dumps(ckpt))
    val_per_task = {}
    for task in spec.tasks:
        val_per_task[task.task_id] = evaluate_individual(
            final.champions[task.task_id], final.modules, spec, task, "val")
    spec.unlock_test()
    test_per_task = {}
    for task in spec.tasks:
        test_per_task[task.task_id] = evaluate_individual(
            final.champions[task.task_id], final.modules, spec, task, "test")
    params = {}
    for m in final.modules:
        for p in m.all_params():
            params[id(p)] = p
    for ind in final.champions.values():
        for p in ind.params():
            params[id(p)] = p
    return {"algorithm": "ctr", "best_avg_val": best,
            "val_per_task": val_per_task,
            "val_accuracy": float(np.mean(list(val_per_task.values()))),
            "test_per_task": test_per_task,
            "test_accuracy": float(np.mean(list(test_per_task.values()))),
            "param_count": sum(p.value.size for p in params.values())}


def _run_coevolution(cfg: ExperimentConfig, out_dir: str) -> dict:
    rng = np.random.default_rng(cfg.seed)
    n_mod, n_sp = cfg.module_counts()
    module_pop = init_module_population(n_mod, n_sp, rng,
                                        cmtr_mode=cfg.algorithm == "cmtr")
    blueprint_pop = None
    if cfg.algorithm == "cmsr":
        blueprint_pop = init_blueprint_population(
            cfg.blueprints, module_pop.species_ids(), rng)
    base_hyper = GlobalHyper(
        learning_rate=cfg.lr, final_layer_filters=cfg.filters,
        k_modules=cfg.k_modules, depth=cfg.depth,
        depth_flags=tuple([True] * cfg.depth), sharing_mode=cfg.sharing_mode)
    hyper_pop = HyperPopulation(cfg.hyper_pool, rng, cfg.sharing_mode,
                                base=base_hyper)
    ctr_cfg = None
    if cfg.algorithm == "cmtr":
        ctr_cfg = dict(meta_iters=cfg.meta_iters, m_iters=cfg.m_iters,
                       alpha=cfg.alpha, lr=None,
                       eval_subsample=cfg.eval_subsample)
    plan = GenerationPlan(
        algorithm=cfg.algorithm,
        networks_per_generation=cfg.networks_per_generation,
        train_iters=cfg.train_iters, stagnation_limit=cfg.stagnation_limit,
        max_generations=cfg.max_generations, elite_frac=cfg.elite_frac,
        deadline_s=cfg.deadline_s, ctr=ctr_cfg)
    evaluator = (distributed_evaluator(cfg.serve) if cfg.serve
                 else local_evaluator)
    rates = MutationRates(sharing_mode=cfg.sharing_mode)
    out = run_generation_loop(plan, module_pop, evaluator, cfg.dataset_ref(),
                              rng, blueprint_pop=blueprint_pop,
                              hyper_pop=hyper_pop, rates=rates, log=print)
    _write_history(os.path.join(out_dir, "history.jsonl"), out.history)
    ctr_long = None
    if cfg.algorithm == "cmtr":
        ctr_long = dict(ctr_cfg, meta_iters=cfg.retrain_meta_iters)
    report = retrain_top(out.archive, cfg.n_top, cfg.long_iters,
                         lr_decay=cfg.algorithm in ("cm", "cmsr"), rng=rng,
                         ctr_long=ctr_long, log=print)
    report["algorithm"] = cfg.algorithm
    report["generations"] = out.generations
    atomic_write_text(os.path.join(out_dir, "best_network.json"),
                      canon_dumps({"kind": "best_network",
                                   "payload": report["payload"],
                                   "report": {k: v for k, v in report.items()
                                              if k != "payload"}}) + "\n")
    return report


def cmd_report(args) -> int:
    rows = []
    multi = len(args.histories) > 1
    for path in args.histories:
        try:
            with open(path) as f:
                lines = [line for line in f.read().splitlines() if line.strip()]
        except OSError as e:
            print(f"error: cannot read {path}: {e}", file=sys.stderr)
            return 1
        if not lines:
            print(f"error: {path} is empty", file=sys.stderr)
            return 1
        run_id = os.path.splitext(os.path.basename(path))[0]
        for line in lines:
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                print(f"error: {path}: bad record ({e})", file=sys.stderr)
                return 1
            step = rec.get("generation", rec.get("meta_iteration"))
            best = rec.get("best_fitness", rec.get("best_avg_val"))
            mean = rec.get("mean_fitness", rec.get("mean_champion_val"))
            if step is None or best is None or mean is None:
                print(f"error: {path}: record missing fields", file=sys.stderr)
                return 1
            rows.append((run_id, step, best, mean))
    header = "run_id,step,best,mean" if multi else "step,best,mean"
    print(header)
    for run_id, step, best, mean in rows:
        prefix = f"{run_id}," if multi else ""
        print(f"{prefix}{step},{best},{mean}")
    return 0


def _load_checkpoint(path: str) -> dict:
    try:
        with open(path) as f:
            return canon_loads(f.read())
    except OSError as e:
        raise EvoMtlError(f"cannot read checkpoint {path}: {e}") from e


def cmd_export_dot(args) -> int:
    obj = _load_checkpoint(args.checkpoint)
    kind = obj.get("kind")
    if args.module is not None:
        if kind == "ctr_state":
            mods = obj["modules"]
            if not 0 <= args.module < len(mods):
                print(f"error: no module {args.module} "
                      f"(checkpoint has {len(mods)})", file=sys.stderr)
                return 1
            genome = genome_from_obj(mods[args.module]["genome"])
        elif kind == "best_network":
            mods = obj["payload"]["modules"]
            if not 0 <= args.module < len(mods):
                print(f"error: no module {args.module} "
                      f"(checkpoint has {len(mods)})", file=sys.stderr)
                return 1
            genome = genome_from_obj(mods[args.module])
        else:
            print(f"error: unknown checkpoint kind {kind!r}", file=sys.stderr)
            return 1
        sys.stdout.write(module_dot(genome, f"module_{args.module}"))
        return 0
    if kind != "ctr_state":
        print("error: routing export needs a routing checkpoint",
              file=sys.stderr)
        return 1
    from .routing import _individual_from_obj
    champs = obj["champions"]
    if args.routing not in champs:
        print(f"error: no task {args.routing!r} in checkpoint "
              f"(tasks: {sorted(champs)})", file=sys.stderr)
        return 1
    ind = _individual_from_obj(champs[args.routing])
    sys.stdout.write(routing_dot(ind, "routing"))
    return 0


def cmd_worker(args) -> int:
    return run_worker(args.addr)


def cmd_eval_test(args) -> int:
    obj = _load_checkpoint(args.checkpoint)
    if obj.get("kind") != "ctr_state":
        print("error: eval-test needs a routing checkpoint "
              "(cm/cmsr runs record test accuracy in report.json)",
              file=sys.stderr)
        return 1
    if "dataset" not in obj:
        print("error: checkpoint lacks a dataset reference", file=sys.stderr)
        return 1
    state = restore_ctr_state(canon_dumps(obj).encode())
    spec = build_dataset(obj["dataset"])
    spec.unlock_test()
    per_task = {}
    for task in spec.tasks:
        per_task[task.task_id] = evaluate_individual(
            state.champions[task.task_id], state.modules, spec, task, "test")
    for tid in sorted(per_task):
        print(f"task {tid}: test {per_task[tid]:.4f}")
    print(f"mean test accuracy: {float(np.mean(list(per_task.values()))):.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
