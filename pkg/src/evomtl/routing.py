"""Per-task routing evolution over one persistent set of shared modules.

Each task runs a (1+1) evolution strategy: the champion routing is copied
into a challenger, the challenger gets one extra module spliced onto a
random ancestor pair, both train jointly (their gradients all land in the
single shared module storage), and the challenger replaces the champion
only on strictly higher validation accuracy. Whenever the mean champion
accuracy reaches a new best, the whole system (modules + champions) is
checkpointed; the final model is whatever the last checkpoint holds.

The spliced edge's merge scale is set so its post-softmax weight is
exactly alpha, which keeps a small-alpha challenger behaviourally close
to its champion before training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    CGNode, CompGraph, Param, ScaleGroup, adam_step, backward, init_weight,
    zero_grads,
)
from .errors import AssemblyError, ConfigError, NumericError, StateError
from .genome import GlobalHyper, LayerGene, ModuleGenome, SINK, SOURCE
from .assembly import ModuleInstance, realize_module
from .dataset import MultitaskSpec
from .serialize import (
    array_from_obj, array_to_obj, atomic_write_text, canon_dumps, canon_loads,
)

NODE_KINDS = ("source", "sink", "module", "adapter")


@dataclass
class RNode:
    kind: str
    module_index: int | None = None


class RoutingGraph:
    """Task-routing DAG. Inbound edge order is stable per node; a node's
    ScaleGroup logit i belongs to its i-th inbound edge."""

    def __init__(self, task_id: str):
        self.task_id = task_id
        self.nodes: dict[int, RNode] = {}
        self.inbound: dict[int, list[int]] = {}
        self.scale_groups: dict[int, ScaleGroup] = {}
        self._next = 0
        self.source_id = self.add_node("source")
        self.sink_id = self.add_node("sink")

    def add_node(self, kind: str, module_index: int | None = None) -> int:
        nid = self._next
        self._next += 1
        self.nodes[nid] = RNode(kind, module_index)
        self.inbound[nid] = []
        return nid

    def add_edge(self, src: int, dst: int) -> None:
        self.inbound[dst].append(src)

    def edges(self):
        for dst, srcs in self.inbound.items():
            for src in srcs:
                yield (src, dst)

    def outbound(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {n: [] for n in self.nodes}
        for src, dst in self.edges():
            out[src].append(dst)
        return out

    def topo_order(self) -> list[int]:
        pending = {n: len(srcs) for n, srcs in self.inbound.items()}
        out = self.outbound()
        ready = sorted(n for n, c in pending.items() if c == 0)
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for m in sorted(out[n]):
                pending[m] -= 1
                if pending[m] == 0:
                    ready.append(m)
            ready.sort()
        if len(order) != len(self.nodes):
            raise StateError("routing graph has a cycle")
        return order

    def ancestors(self, node: int) -> set[int]:
        seen = set()
        stack = list(self.inbound[node])
        while stack:
            n = stack.pop()
            if n not in seen:
                seen.add(n)
                stack.extend(self.inbound[n])
        return seen

    def copy(self) -> "RoutingGraph":
        g = RoutingGraph.__new__(RoutingGraph)
        g.task_id = self.task_id
        g.nodes = {n: RNode(r.kind, r.module_index) for n, r in self.nodes.items()}
        g.inbound = {n: list(srcs) for n, srcs in self.inbound.items()}
        g.scale_groups = {n: sg.copy() for n, sg in self.scale_groups.items()}
        g._next = self._next
        g.source_id = self.source_id
        g.sink_id = self.sink_id
        return g


def check_routing_graph(graph: RoutingGraph, n_modules: int) -> list[str]:
    errs = []
    try:
        graph.topo_order()
    except StateError:
        return ["cycle"]
    sources = [n for n, srcs in graph.inbound.items() if not srcs]
    out = graph.outbound()
    sinks = [n for n, dsts in out.items() if not dsts]
    if sources != [graph.source_id]:
        errs.append(f"sources {sources}")
    if sinks != [graph.sink_id]:
        errs.append(f"sinks {sinks}")
    desc = graph.ancestors(graph.sink_id) | {graph.sink_id}
    for n, r in graph.nodes.items():
        if r.kind == "module" and not 0 <= r.module_index < n_modules:
            errs.append(f"node {n}: module index {r.module_index}")
        if r.kind == "adapter" and len(graph.inbound[n]) != 1:
            errs.append(f"adapter {n} has in-degree {len(graph.inbound[n])}")
        if n not in desc and n != graph.sink_id:
            errs.append(f"node {n} cannot reach the sink")
    reach = {graph.source_id}
    for n in graph.topo_order():
        if n in reach:
            for m in out[n]:
                reach.add(m)
    missing = set(graph.nodes) - reach
    if missing:
        errs.append(f"nodes unreachable from source: {sorted(missing)}")
    for n, srcs in graph.inbound.items():
        if len(srcs) > 1:
            sg = graph.scale_groups.get(n)
            if sg is None or sg.size != len(srcs):
                errs.append(f"node {n}: scale group missing or wrong size")
        elif n in graph.scale_groups:
            errs.append(f"node {n}: spurious scale group")
    return errs


def node_sides(graph: RoutingGraph, modules, image_side: int) -> dict[int, int]:
    """Static output spatial size per node (raises where infeasible)."""
    sides = {}
    for n in graph.topo_order():
        r = graph.nodes[n]
        if r.kind == "source":
            sides[n] = image_side
            continue
        insides = {sides[p] for p in graph.inbound[n]}
        if len(insides) != 1:
            raise AssemblyError(f"node {n}: unaligned merge inputs {insides}")
        s = insides.pop()
        if r.kind == "module":
            sides[n] = modules[r.module_index].out_side(s)
        elif r.kind == "adapter":
            if s < 2:
                raise AssemblyError("adapter on a map smaller than 2x2")
            sides[n] = s // 2
        else:  # sink
            sides[n] = s
    return sides


class RoutingIndividual:
    """(encoder, routing graph, decoder) with its own decoder and scale
    weights; module weights live in the shared set."""

    def __init__(self, graph: RoutingGraph, decoder_w: Param, decoder_b: Param):
        self.graph = graph
        self.decoder_w = decoder_w
        self.decoder_b = decoder_b
        self.mutation_failed = False

    def copy(self) -> "RoutingIndividual":
        ind = RoutingIndividual(self.graph.copy(),
                                self.decoder_w.copy(), self.decoder_b.copy())
        return ind

    def params(self) -> list[Param]:
        out = [self.decoder_w, self.decoder_b]
        out.extend(sg.logits for sg in self.graph.scale_groups.values())
        return out

    def forward(self, g: CompGraph, modules, x: CGNode) -> CGNode:
        vals: dict[int, CGNode] = {}
        graph = self.graph
        for n in graph.topo_order():
            r = graph.nodes[n]
            if r.kind == "source":
                vals[n] = x  # identity encoder
                continue
            inputs = [vals[p] for p in graph.inbound[n]]
            if len(inputs) > 1:
                v = g.softmerge(graph.scale_groups[n], inputs)
            else:
                v = inputs[0]
            if r.kind == "module":
                vals[n] = modules[r.module_index].apply(g, v)
            elif r.kind == "adapter":
                vals[n] = g.maxpool2x2(v)
            else:  # sink: decode
                return g.dense(g.flatten(v), self.decoder_w, self.decoder_b)
        raise StateError("routing graph has no sink")


@dataclass
class CtrState:
    modules: list[ModuleInstance]
    champions: dict[str, RoutingIndividual]
    challengers: dict[str, RoutingIndividual] = field(default_factory=dict)
    meta_iteration: int = 0
    best_avg_val: float = float("-inf")
    checkpoint_bytes: bytes | None = None
    image_side: int = 0
    class_counts: dict[str, int] = field(default_factory=dict)

    def all_params(self) -> list[Param]:
        out = []
        for m in self.modules:
            out.extend(m.all_params())
        for ind in self.champions.values():
            out.extend(ind.params())
        for ind in self.challengers.values():
            out.extend(ind.params())
        return out


def default_ctr_modules(k: int, image_side: int, rng: np.random.Generator,
                        filters: int = 8) -> list[ModuleInstance]:
    """K plain conv modules sized so the classical chain assembles at the
    given image side (kernel 3 where the map allows it, else 1)."""
    ghyper = GlobalHyper(final_layer_filters=filters,
                         k_modules=min(max(k, 2), 6), weight_init="he")
    modules = []
    side = image_side
    for i in range(k):
        kernel = 3 if side >= 3 else 1
        gene = LayerGene(2, "conv2d", "relu", kernel, filters, 1e-6, 0.0)
        tail = LayerGene(-1, "conv2d", "relu", 1, filters, 1e-6, 0.0)
        genome = ModuleGenome(
            genome_id=i + 1, nodes={2: gene},
            edges={3: (SOURCE, 2), 4: (2, SINK)},
            share_flag=True, final_layer=tail)
        inst = realize_module(genome, ghyper, rng, f"m{i}")
        out = inst.out_side(side)
        side = out // 2 if out >= 4 else out  # init chain adds an adapter here
        modules.append(inst)
    return modules


def init_ctr(modules: list[ModuleInstance], spec: MultitaskSpec,
             rng: np.random.Generator) -> CtrState:
    """Champions start as the classical chain through every module, with
    an adapter after each module whose output is at least 4x4."""
    if not modules:
        raise ConfigError("need at least one shared module")
    width = modules[0].ghyper.final_layer_filters
    init = modules[0].ghyper.weight_init
    champions = {}
    class_counts = {}
    for task in spec.tasks:
        graph = RoutingGraph(task.task_id)
        prev = graph.source_id
        side = spec.image_side
        for k, module in enumerate(modules):
            nid = graph.add_node("module", k)
            graph.add_edge(prev, nid)
            prev = nid
            side = module.out_side(side)
            if side >= 4:
                aid = graph.add_node("adapter")
                graph.add_edge(prev, aid)
                prev = aid
                side //= 2
        graph.add_edge(prev, graph.sink_id)
        features = side * side * width
        dec_w = Param(f"dec.{task.task_id}.w",
                      init_weight(rng, (features, task.class_count),
                                  features, task.class_count, init))
        dec_b = Param(f"dec.{task.task_id}.b", np.zeros(task.class_count))
        champions[task.task_id] = RoutingIndividual(graph, dec_w, dec_b)
        class_counts[task.task_id] = task.class_count
    return CtrState(modules=modules, champions=champions,
                    image_side=spec.image_side, class_counts=class_counts)


def new_edge_logit(existing: np.ndarray, alpha: float) -> float:
    """Logit whose post-softmax weight against `existing` is exactly alpha."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    s_max = float(np.max(existing))
    return math.log(alpha / (1.0 - alpha) * float(np.exp(existing - s_max).sum())) \
        + s_max


def _extend_scale_group(graph: RoutingGraph, v: int, alpha: float) -> None:
    """Give node v's newest inbound edge post-softmax weight alpha,
    creating the group (incumbent weight 1 - alpha) if v just became a
    merge point."""
    sg = graph.scale_groups.get(v)
    if sg is None:
        existing = np.zeros(1)
        logits = np.array([0.0, new_edge_logit(existing, alpha)])
        graph.scale_groups[v] = ScaleGroup(
            f"{graph.task_id}.n{v}", Param(f"{graph.task_id}.n{v}.scales", logits))
        return
    old = sg.logits
    logits = np.append(old.value, new_edge_logit(old.value, alpha))
    p = Param(old.name, logits)
    p.adam_m = np.append(old.adam_m, 0.0)
    p.adam_v = np.append(old.adam_v, 0.0)
    p.step_count = old.step_count
    graph.scale_groups[v] = ScaleGroup(sg.owner, p)


def mutate_challenger(champion: RoutingIndividual, modules, alpha: float,
                      rng: np.random.Generator, image_side: int,
                      max_tries: int = 30) -> RoutingIndividual:
    """Copy the champion (learned weights included) and splice one random
    module between an ancestor pair (u, v), entering v's merge with
    post-softmax weight alpha. Falls back to a plain copy (flagged)
    when no feasible insertion is found."""
    challenger = champion.copy()
    graph = challenger.graph
    sides = node_sides(graph, modules, image_side)
    targets = [n for n, r in graph.nodes.items()
               if r.kind in ("module", "sink") and graph.inbound[n]]
    for _ in range(max_tries):
        v = targets[rng.integers(len(targets))]
        anc = sorted(graph.ancestors(v))
        u = anc[rng.integers(len(anc))]
        k = int(rng.integers(len(modules)))
        target_side = sides[graph.inbound[v][0]]
        try:
            s_w = modules[k].out_side(sides[u])
        except AssemblyError:
            continue
        # pool the new branch down to v's established input size; sizes all
        # live on one halving chain, so equality is reachable iff s_w >= target
        s = s_w
        hops = 0
        while s > target_side:
            s //= 2
            hops += 1
        if s != target_side:
            continue
        w = graph.add_node("module", k)
        graph.add_edge(u, w)
        prev = w
        for _ in range(hops):
            a = graph.add_node("adapter")
            graph.add_edge(prev, a)
            prev = a
        graph.add_edge(prev, v)
        _extend_scale_group(graph, v, alpha)
        challenger.mutation_failed = False
        return challenger
    challenger.mutation_failed = True
    return challenger


def output_divergence(a: RoutingIndividual, b: RoutingIndividual, modules,
                      inputs) -> float:
    """Relative L2 divergence of two individuals' outputs over a batch of
    inputs: sqrt(sum |a_i - b_i|^2 / sum |a_i|^2). The batch aggregate is
    used because single random inputs can land near the untrained
    decoder's null space and make a per-input ratio meaningless."""
    num = den = 0.0
    for x in inputs:
        g1, g2 = CompGraph("eval"), CompGraph("eval")
        va = a.forward(g1, modules, g1.leaf(x)).value
        vb = b.forward(g2, modules, g2.leaf(x)).value
        num += float(np.sum((va - vb) ** 2))
        den += float(np.sum(va ** 2))
    return math.sqrt(num / den) if den > 0 else 0.0


def joint_train(state: CtrState, spec: MultitaskSpec, m_iters: int, lr: float,
                rng: np.random.Generator) -> None:
    """Train champions and challengers together: per iteration, one train
    example per (task, individual), gradients accumulated into the shared
    modules, one Adam step."""
    params = state.all_params()
    zero_grads(params)
    for _ in range(m_iters):
        for ti, task in enumerate(spec.tasks):
            pool = task.split.train
            if not pool:
                raise StateError(f"task {task.task_id}: empty train split")
            individuals = [state.champions[task.task_id]]
            chal = state.challengers.get(task.task_id)
            if chal is not None:
                individuals.append(chal)
            for ind in individuals:
                img, label = task.examples[pool[rng.integers(len(pool))]]
                g = CompGraph("train", rng)
                logits = ind.forward(g, state.modules, g.leaf(img))
                backward(g, g.cross_entropy(logits, label))
        adam_step(params, lr)


def evaluate_individual(ind: RoutingIndividual, modules,
                        spec: MultitaskSpec, task, split: str = "val",
                        subsample: int | None = None,
                        rng: np.random.Generator | None = None) -> float:
    examples = spec.examples_for(task, split)
    if subsample is not None and rng is not None and subsample < len(examples):
        idx = rng.choice(len(examples), size=subsample, replace=False)
        examples = [examples[i] for i in idx]
    if not examples:
        return 0.0
    correct = 0
    for img, label in examples:
        g = CompGraph("eval")
        logits = ind.forward(g, modules, g.leaf(img))
        if int(np.argmax(logits.value)) == label:
            correct += 1
    return correct / len(examples)


def select_and_checkpoint(state: CtrState, accuracies: dict) -> None:
    """Champion := challenger on strictly higher validation accuracy (ties
    keep the champion); checkpoint the full system on a new best mean."""
    champ_accs = {}
    for tid in state.champions:
        champ_acc = accuracies[tid]["champion"]
        chal_acc = accuracies[tid].get("challenger")
        if chal_acc is not None and chal_acc > champ_acc:
            state.champions[tid] = state.challengers[tid]
            champ_accs[tid] = chal_acc
        else:
            champ_accs[tid] = champ_acc
    state.challengers = {}
    mean = float(np.mean(list(champ_accs.values())))
    if mean > state.best_avg_val:
        state.best_avg_val = mean
        state.checkpoint_bytes = serialize_ctr_state(state)


def run_ctr(modules, spec: MultitaskSpec, meta_iters: int, m_iters: int,
            alpha: float, lr: float, rng: np.random.Generator,
            checkpoint_path: str | None = None,
            eval_subsample: int | None = None):
    """Full routing-evolution loop; returns (checkpoint-restored state,
    best mean validation accuracy, per-meta-iteration history)."""
    if meta_iters < 1:
        raise ConfigError("need at least one meta-iteration")
    state = init_ctr(modules, spec, rng)
    history = []
    for mi in range(1, meta_iters + 1):
        state.meta_iteration = mi
        state.challengers = {
            tid: mutate_challenger(champ, state.modules, alpha, rng,
                                   spec.image_side)
            for tid, champ in state.champions.items()}
        try:
            joint_train(state, spec, m_iters, lr, rng)
        except NumericError as e:
            raise NumericError(f"meta-iteration {mi}: {e}") from e
        accs = {}
        for task in spec.tasks:
            tid = task.task_id
            accs[tid] = {
                "champion": evaluate_individual(
                    state.champions[tid], state.modules, spec, task,
                    subsample=eval_subsample, rng=rng),
                "challenger": evaluate_individual(
                    state.challengers[tid], state.modules, spec, task,
                    subsample=eval_subsample, rng=rng),
            }
        replaced = sum(1 for tid in accs
                       if accs[tid]["challenger"] > accs[tid]["champion"])
        select_and_checkpoint(state, accs)
        mean_now = float(np.mean([
            max(accs[tid]["champion"], accs[tid]["challenger"])
            for tid in accs]))
        history.append({"meta_iteration": mi,
                        "mean_champion_val": mean_now,
                        "best_avg_val": state.best_avg_val,
                        "replaced": replaced})
    final = restore_ctr_state(state.checkpoint_bytes)
    if checkpoint_path is not None:
        payload = canon_loads(state.checkpoint_bytes)
        payload["history"] = history
        payload["rng_state"] = _rng_state_obj(rng)
        atomic_write_text(checkpoint_path, canon_dumps(payload))
    return final, state.best_avg_val, history


# --- serialization -----------------------------------------------------------


def _param_obj(p: Param) -> dict:
    return {"name": p.name, "value": array_to_obj(p.value),
            "adam_m": array_to_obj(p.adam_m), "adam_v": array_to_obj(p.adam_v),
            "step_count": p.step_count, "l2_strength": p.l2_strength,
            "shared_id": p.shared_id}


def _param_load(p: Param, obj) -> None:
    p.value[...] = array_from_obj(obj["value"])
    p.adam_m[...] = array_from_obj(obj["adam_m"])
    p.adam_v[...] = array_from_obj(obj["adam_v"])
    p.step_count = int(obj["step_count"])
    p.l2_strength = float(obj["l2_strength"])


def _param_from_obj(obj) -> Param:
    p = Param(obj["name"], array_from_obj(obj["value"]),
              l2_strength=float(obj["l2_strength"]), shared_id=obj["shared_id"])
    p.adam_m = array_from_obj(obj["adam_m"])
    p.adam_v = array_from_obj(obj["adam_v"])
    p.step_count = int(obj["step_count"])
    return p


def module_instance_to_obj(inst: ModuleInstance) -> dict:
    from .genome import genome_to_obj, hyper_to_obj
    return {
        "genome": genome_to_obj(inst.genome),
        "ghyper": hyper_to_obj(inst.ghyper),
        "label": inst.label,
        "storage_id": inst.storage_id,
        "params": {k: _param_obj(p) for k, p in inst.params.items()},
        "scales": {str(n): _param_obj(sg.logits)
                   for n, sg in inst.scale_groups.items()},
    }


def module_instance_from_obj(obj) -> ModuleInstance:
    from .genome import genome_from_obj, hyper_from_obj
    inst = ModuleInstance(genome_from_obj(obj["genome"]),
                          hyper_from_obj(obj["ghyper"]),
                          np.random.default_rng(0), obj["label"],
                          obj["storage_id"])
    for key, pobj in obj["params"].items():
        _param_load(inst.params[key], pobj)
    for n, pobj in obj["scales"].items():
        _param_load(inst.scale_groups[int(n)].logits, pobj)
    return inst


def _individual_obj(ind: RoutingIndividual) -> dict:
    graph = ind.graph
    return {
        "task_id": graph.task_id,
        "nodes": {str(n): {"kind": r.kind, "module_index": r.module_index}
                  for n, r in graph.nodes.items()},
        "inbound": {str(n): srcs for n, srcs in graph.inbound.items()},
        "next": graph._next,
        "source_id": graph.source_id,
        "sink_id": graph.sink_id,
        "scales": {str(n): _param_obj(sg.logits)
                   for n, sg in graph.scale_groups.items()},
        "decoder_w": _param_obj(ind.decoder_w),
        "decoder_b": _param_obj(ind.decoder_b),
    }


def _individual_from_obj(obj) -> RoutingIndividual:
    graph = RoutingGraph.__new__(RoutingGraph)
    graph.task_id = obj["task_id"]
    graph.nodes = {int(n): RNode(r["kind"], r["module_index"])
                   for n, r in obj["nodes"].items()}
    graph.inbound = {int(n): [int(s) for s in srcs]
                     for n, srcs in obj["inbound"].items()}
    graph._next = int(obj["next"])
    graph.source_id = int(obj["source_id"])
    graph.sink_id = int(obj["sink_id"])
    graph.scale_groups = {}
    for n, pobj in obj["scales"].items():
        p = _param_from_obj(pobj)
        graph.scale_groups[int(n)] = ScaleGroup(f"{graph.task_id}.n{n}", p)
    return RoutingIndividual(graph, _param_from_obj(obj["decoder_w"]),
                             _param_from_obj(obj["decoder_b"]))


def serialize_ctr_state(state: CtrState) -> bytes:
    obj = {
        "kind": "ctr_state",
        "meta_iteration": state.meta_iteration,
        "best_avg_val": state.best_avg_val,
        "image_side": state.image_side,
        "class_counts": state.class_counts,
        "modules": [module_instance_to_obj(m) for m in state.modules],
        "champions": {tid: _individual_obj(ind)
                      for tid, ind in state.champions.items()},
    }
    return canon_dumps(obj).encode("utf-8")


def restore_ctr_state(data: bytes) -> CtrState:
    obj = canon_loads(data)
    return CtrState(
        modules=[module_instance_from_obj(m) for m in obj["modules"]],
        champions={tid: _individual_from_obj(io)
                   for tid, io in obj["champions"].items()},
        meta_iteration=int(obj["meta_iteration"]),
        best_avg_val=float(obj["best_avg_val"]),
        image_side=int(obj["image_side"]),
        class_counts={k: int(v) for k, v in obj["class_counts"].items()},
    )


def _rng_state_obj(rng: np.random.Generator) -> dict:
    return _jsonable(rng.bit_generator.state)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj
