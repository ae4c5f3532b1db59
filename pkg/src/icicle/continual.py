"""Class-incremental training: task loop, prototype initialisation, bias compensation, baselines."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses as L
from . import metrics as M
from . import numerics as nx
from . import protonet as pn
from .data import Split, TaskSpec, TaskStream
from .numerics import Tensor

log = logging.getLogger(__name__)

METHODS = ("icicle", "finetuning", "freezing", "ewc", "lwf", "joint")
STRATEGIES = ("random", "proximity", "all", "distant")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class TrainSchedule:
    warmup_epochs: int = 5
    joint_epochs: int = 21
    projection_period: int = 10
    patience: int = 12
    lr_halving_period: int = 5
    lr_backbone: float = 1e-4
    lr_addon: float = 1e-3
    lr_prototypes: float = 1e-3
    weight_decay: float = 1e-4
    decay_prototypes: bool = False
    batch_size: int = 25
    final_projection: bool = True

    @classmethod
    def for_tasks(cls, num_tasks: int, **overrides) -> TrainSchedule:
        """Epoch budget for the 4 / 10 / 20-task regimes."""
        if num_tasks <= 4:
            base = cls(5, 21, 10)
        elif num_tasks <= 10:
            base = cls(5, 15, 7)
        else:
            base = cls(4, 10, 5)
        return replace(base, **overrides)

    def validate(self) -> None:
        if self.warmup_epochs < 0 or self.joint_epochs < 0:
            raise TrainingError("epoch counts must be non-negative")
        if self.projection_period < 1 or self.patience < 1 or self.lr_halving_period < 1:
            raise TrainingError("periods and patience must be at least 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be positive")


@dataclass(frozen=True)
class InitConfig:
    strategy: str = "proximity"
    alpha: float = 0.5
    max_iter: int = 50
    first_task: str = "all"  # what proximity/distant do before any prototypes exist

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise TrainingError(f"unknown init strategy {self.strategy!r}")
        if not 0.0 <= self.alpha < 1.0:
            raise TrainingError("alpha must lie in [0, 1)")
        if self.first_task not in ("all", "random"):
            raise TrainingError("first_task fallback must be 'all' or 'random'")


@dataclass(frozen=True)
class MethodConfig:
    method: str = "icicle"
    ewc_alpha: float = 1.0
    lwf_lambda: float = 1.0
    lwf_temperature: float = 2.0
    ewc_max_samples: int = 500
    # icicle components; None means "on for icicle, off for the baselines"
    regularize: bool | None = None
    compensate: bool | None = None
    init: str | None = None

    def validate(self) -> None:
        if self.method not in METHODS:
            raise TrainingError(f"unknown method {self.method!r}")
        if self.init is not None and self.init not in STRATEGIES:
            raise TrainingError(f"unknown init strategy {self.init!r}")

    @property
    def uses_regularization(self) -> bool:
        return self.method == "icicle" if self.regularize is None else self.regularize

    @property
    def uses_compensation(self) -> bool:
        return self.method == "icicle" if self.compensate is None else self.compensate

    def init_strategy(self, default: str) -> str:
        if self.init is not None:
            return self.init
        return default if self.method == "icicle" else "random"


# ---------------------------------------------------------------- clustering

def kmeans_pp_seeds(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``k`` KMeans++ seeds (D^2 sampling)."""
    n = len(points)
    first = int(rng.integers(n))
    chosen = [first]
    closest = ((points - points[first]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a seed; fall back to uniform picks
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.uniform(0, total), side="right"))
            idx = min(idx, n - 1)
        chosen.append(idx)
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(chosen)


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (points * points).sum(1)[:, None] + (centers * centers).sum(1)[None, :] - 2.0 * points @ centers.T
    return np.maximum(d, 0.0)


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 50):
    """KMeans++ seeding followed by Lloyd iterations.

    Returns (centers, labels, objective history); the objective is the sum of
    squared distances to the assigned center and never increases.
    """
    points = np.asarray(points, dtype=np.float64)
    centers = points[kmeans_pp_seeds(points, k, rng)].copy()
    history = []
    labels = None
    for _ in range(max_iter):
        d = _sq_dists(points, centers)
        new_labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(len(points)), new_labels].sum()))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        for j in range(k):
            members = points[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    d = _sq_dists(points, centers)
    labels = np.argmin(d, axis=1)
    history.append(float(d[np.arange(len(points)), labels].sum()))
    return centers, labels, history


def cluster_candidates(candidates: np.ndarray, count: int, rng: np.random.Generator, max_iter: int = 50) -> np.ndarray:
    if len(candidates) == 0:
        raise TrainingError("no candidate patches to cluster")
    if len(candidates) < count:
        log.warning("only %d candidates for %d prototypes; padding with jittered copies", len(candidates), count)
        extra = candidates[rng.integers(len(candidates), size=count - len(candidates))]
        extra = extra + rng.uniform(-1e-3, 1e-3, size=extra.shape)
        return np.concatenate([candidates, extra])
    return kmeans(candidates, count, rng, max_iter)[0]


def patch_max_similarity(model: pn.IcicleModel, patches: np.ndarray) -> np.ndarray:
    """Highest similarity of every patch to any existing prototype."""
    protos = np.concatenate([p.data for p in model.prototype_params()])
    best = np.empty(len(patches))
    for start in range(0, len(patches), 4096):
        chunk = patches[start:start + 4096]
        dist = nx.pairwise_l2(Tensor(chunk), Tensor(protos)).data.min(axis=1)
        best[start:start + 4096] = pn.similarity(dist, model.config.eta)
    return best


def select_candidates(model: pn.IcicleModel, patches: np.ndarray, strategy: str, alpha: float) -> np.ndarray:
    if strategy == "all":
        return patches
    stat = patch_max_similarity(model, patches)
    if strategy == "proximity":
        threshold = np.quantile(stat, alpha)
        return patches[stat >= threshold]
    if strategy == "distant":
        threshold = np.quantile(stat, 1.0 - alpha)
        return patches[stat <= threshold]
    raise TrainingError(f"strategy {strategy!r} does not select candidates")


def init_prototypes(model: pn.IcicleModel, images, num_classes: int, cfg: InitConfig, rng: np.random.Generator) -> np.ndarray:
    """Initial (K * num_classes, D) prototypes for a new head."""
    cfg.validate()
    count = model.config.protos_per_class * num_classes
    d = model.config.depth
    strategy = cfg.strategy
    if strategy in ("proximity", "distant") and not model.heads:
        strategy = cfg.first_task
    if strategy == "random":
        return rng.uniform(0.0, 1.0, size=(count, d))
    images = np.asarray(images)
    if len(images) == 0:
        raise TrainingError("no task data for prototype initialisation")
    patches = pn.feature_maps(model, images).reshape(-1, d)
    candidates = select_candidates(model, patches, strategy, cfg.alpha)
    return cluster_candidates(candidates, count, rng, cfg.max_iter)


# ---------------------------------------------------------------- compensation

@dataclass
class CompensationResult:
    bias: list[float]  # one constant per previous head
    u: float
    target_flips: int
    flips: list[int]
    calibration_size: int


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def compensation_constant(gaps: np.ndarray, k: int) -> float:
    """Constant c with exactly ``k`` gaps strictly below it (when gaps are distinct)."""
    d = np.sort(np.asarray(gaps, dtype=np.float64))
    n = len(d)
    if k <= 0:
        return float(d[0] - 1e-6 * max(1.0, abs(d[0])))
    if k >= n:
        return float(d[-1] + 1e-6 * max(1.0, abs(d[-1])))
    lo, hi = d[k - 1], d[k]
    if hi - lo <= 1e-12:
        log.warning("tied calibration gaps at rank %d; flip count may differ from %d", k, k)
        return float(lo + 1e-9)
    return float(0.5 * (lo + hi))


def compute_compensation(logits: np.ndarray, slices, u: float = 0.1) -> CompensationResult:
    """Per-head additive bias calibrated on logits of the newest task's data.

    For every older head t, ``c_t`` is chosen so that round(u * N) samples get
    max(head t) + c_t > max(newest head).
    """
    if len(slices) < 2:
        raise TrainingError("compensation needs at least two heads")
    n = len(logits)
    if n == 0:
        raise TrainingError("empty calibration set")
    k = round_half_up(u * n)
    last = logits[:, slices[-1][1]].max(axis=1)
    bias, flips = [], []
    for _, cs in slices[:-1]:
        gaps = last - logits[:, cs].max(axis=1)
        c = compensation_constant(gaps, k)
        bias.append(c)
        flips.append(int(np.sum(logits[:, cs].max(axis=1) + c > last)))
    return CompensationResult(bias, u, k, flips, n)


def apply_compensation(logits: np.ndarray, result: CompensationResult, slices) -> np.ndarray:
    if len(result.bias) != len(slices) - 1:
        raise TrainingError(f"compensation covers {len(result.bias)} heads, model has {len(slices)}")
    out = np.array(logits, dtype=np.float64, copy=True)
    for c, (_, cs) in zip(result.bias, slices[:-1]):
        out[:, cs] += c
    return out


# ---------------------------------------------------------------- EWC and LwF

@dataclass
class EwcState:
    importance: dict[str, np.ndarray] = field(default_factory=dict)
    anchor: dict[str, np.ndarray] = field(default_factory=dict)
    tasks_seen: int = 0


def ewc_accumulate(model: pn.IcicleModel, images, labels, state: EwcState | None = None,
                   max_samples: int = 500, rng: np.random.Generator | None = None) -> EwcState:
    """Empirical diagonal Fisher of the shared parameters, averaged with earlier tasks."""
    images, labels = np.asarray(images), np.asarray(labels)
    if len(images) == 0:
        raise TrainingError("EWC needs task data")
    if len(images) > max_samples:
        pick = np.sort((rng or nx.make_rng(0)).choice(len(images), max_samples, replace=False))
        images, labels = images[pick], labels[pick]
    shared = model.shared_params()
    fisher = {p.name: np.zeros_like(p.data) for p in shared}
    for x, y in zip(images, labels):
        for p in model.parameters():
            p.grad = None
        L.cross_entropy_full(model, x[None], [y]).backward()
        for p in shared:
            if p.grad is not None:
                fisher[p.name] += p.grad * p.grad
    for name in fisher:
        fisher[name] /= len(images)
    for p in model.parameters():
        p.grad = None
    state = state or EwcState()
    t = state.tasks_seen
    for name, f in fisher.items():
        prev = state.importance.get(name)
        state.importance[name] = f if prev is None else (t * prev + f) / (t + 1)
    state.anchor = {p.name: p.data.copy() for p in shared}
    state.tasks_seen = t + 1
    return state


def ewc_penalty(state: EwcState, model: pn.IcicleModel) -> Tensor:
    total = Tensor(0.0)
    for p in model.shared_params():
        if p.name not in state.importance:
            continue
        delta = nx.sub(p, state.anchor[p.name])
        total = nx.add(total, nx.sum_(nx.mul(nx.square(delta), state.importance[p.name])))
    return total


def lwf_from_logits(old_logits: np.ndarray, new_logits: Tensor, slices, temperature: float = 2.0) -> Tensor:
    """Sum over old heads of T^2 * KL(old || new) on temperature-softened head logits."""
    total = Tensor(0.0)
    for _, cs in slices:
        head_new = nx.index(new_logits, (slice(None), cs))
        kl = nx.kl_softmax(old_logits[:, cs], head_new, temperature)
        total = nx.add(total, nx.mul(kl, temperature**2))
    return total


def lwf_penalty(snap, model, images, temperature: float = 2.0) -> Tensor:
    if snap is None or not pn._as_model(snap).heads:
        return Tensor(0.0)
    with nx.no_grad():
        old = pn.run(snap, images).logits.data
    new = pn.run(model, images).logits
    return lwf_from_logits(old, new, pn._as_model(snap).head_slices(), temperature)


# ---------------------------------------------------------------- training

@dataclass
class EpochLog:
    phase: str
    epoch: int
    train_loss: float
    val_loss: float | None = None


@dataclass
class TaskResult:
    head: pn.PrototypeHead
    snapshot: pn.Snapshot
    log: list[EpochLog]
    best_epoch: int | None
    stopped_early: bool


class ContinualEngine:
    """Holds the model and everything a method carries between tasks."""

    def __init__(
        self,
        model_config: pn.ModelConfig,
        method: MethodConfig = MethodConfig(),
        schedule: TrainSchedule = TrainSchedule(),
        weights: L.LossWeights = L.LossWeights(),
        gamma: float = 1 / 49,
        placement: str = "similarity",
        init: InitConfig = InitConfig(),
        u: float = 0.1,
        seed: int = 0,
    ):
        method.validate()
        schedule.validate()
        init.validate()
        self.method = method
        self.schedule = schedule
        self.weights = weights
        self.gamma = gamma
        self.placement = L.RegPlacement(placement)
        self.init = replace(init, strategy=method.init_strategy(init.strategy))
        self.u = u
        self.rng = nx.make_rng(seed)
        self.model = pn.IcicleModel(model_config, seed=int(self.rng.integers(2**31)))
        self.ewc: EwcState | None = None
        self.compensation: CompensationResult | None = None
        self.seen: list[TaskSpec] = []

    # -- loss assembly
    def _loss_weights(self) -> L.LossWeights:
        if self.method.uses_regularization:
            return self.weights
        return replace(self.weights, ir=0.0)

    def _extra(self, snap, images):
        method = self.method
        if method.method == "ewc" and self.ewc is not None:
            return lambda fp: nx.mul(ewc_penalty(self.ewc, self.model), method.ewc_alpha)
        if method.method == "lwf" and snap is not None:
            with nx.no_grad():
                old = pn.run(snap, images).logits.data
            slices = snap.model.head_slices()
            return lambda fp: nx.mul(
                lwf_from_logits(old, fp.logits, slices, method.lwf_temperature), method.lwf_lambda
            )
        return None

    def batch_loss(self, snap, images, labels) -> L.LossTerms:
        return L.total_loss(
            self.model, snap, images, labels, self._loss_weights(), self.gamma, self.placement,
            extra=self._extra(snap, images),
        )

    def validation_loss(self, snap, split: Split) -> float:
        total = 0.0
        bs = max(self.schedule.batch_size, 64)
        with nx.no_grad():
            for start in range(0, len(split), bs):
                x = split.images[start:start + bs]
                y = split.labels[start:start + bs]
                total += self.batch_loss(snap, x, y).total.item() * len(y)
        return total / len(split)

    # -- optimiser groups
    def _groups(self, phase: str, head: pn.PrototypeHead) -> list[nx.ParamGroup]:
        s = self.schedule
        frozen = self.method.method == "freezing" and len(self.model.heads) > 1
        if self.method.method == "joint":
            protos = self.model.prototype_params()
        elif frozen:
            protos = [head.prototypes]
        else:
            protos = self.model.prototype_params() if phase == "joint" else [head.prototypes]
        if phase == "warmup":
            groups = [nx.ParamGroup(protos, s.lr_prototypes)]
            if not frozen:
                groups.insert(0, nx.ParamGroup(self.model.addon_params(), s.lr_addon))
            return groups
        wd_p = s.weight_decay if s.decay_prototypes else 0.0
        groups = [nx.ParamGroup(protos, s.lr_prototypes, wd_p)]
        if not frozen:
            groups[:0] = [
                nx.ParamGroup(self.model.backbone_params(), s.lr_backbone, s.weight_decay),
                nx.ParamGroup(self.model.addon_params(), s.lr_addon, s.weight_decay),
            ]
        return groups

    def _epoch(self, opt: nx.Adam, snap, split: Split) -> float:
        order = self.rng.permutation(len(split))
        bs = self.schedule.batch_size
        total = 0.0
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            opt.zero_grad()
            terms = self.batch_loss(snap, split.images[idx], split.labels[idx])
            if not math.isfinite(terms.total.item()):
                raise TrainingError("non-finite training loss")
            terms.total.backward()
            opt.step()
            total += terms.total.item() * len(idx)
        return total / len(split)

    def _project(self, train: Split) -> None:
        heads = self.model.heads if self.method.method == "joint" else self.model.heads[-1:]
        for head in heads:
            keep = np.isin(train.labels, head.classes)
            pn.project_prototypes(self.model, head, train.images[keep], train.labels[keep])

    def train_task(self, task: TaskSpec) -> TaskResult:
        if set(task.classes) & set(self.model.classes):
            raise TrainingError("task classes overlap classes already learned")
        if min(len(task.train), len(task.val), len(task.test)) == 0:
            raise TrainingError(f"task {task.task_id} has an empty split")
        self.seen.append(task)
        if self.method.method == "joint":
            train = _union([t.train for t in self.seen])
            val = _union([t.val for t in self.seen])
        else:
            train, val = task.train, task.val
        snap = pn.snapshot(self.model) if self.model.heads else None
        protos = init_prototypes(self.model, task.train.images, len(task.classes), self.init, self.rng)
        head = self.model.add_head(task.classes, protos)
        s = self.schedule
        history: list[EpochLog] = []

        if s.warmup_epochs:
            opt = nx.Adam(self._groups("warmup", head))
            for epoch in range(1, s.warmup_epochs + 1):
                history.append(EpochLog("warmup", epoch, self._epoch(opt, snap, train)))

        best_loss, best_state, best_epoch, stale, stopped = math.inf, None, None, 0, False
        if s.joint_epochs:
            opt = nx.Adam(self._groups("joint", head))
            for epoch in range(1, s.joint_epochs + 1):
                train_loss = self._epoch(opt, snap, train)
                if epoch % s.projection_period == 0:
                    self._project(train)
                val_loss = self.validation_loss(snap, val)
                history.append(EpochLog("joint", epoch, train_loss, val_loss))
                if val_loss < best_loss:
                    best_loss, best_state, best_epoch, stale = val_loss, self.model.state(), epoch, 0
                else:
                    stale += 1
                    if stale >= s.patience:
                        stopped = True
                        break
                if epoch % s.lr_halving_period == 0:
                    opt.scale_lr(0.5)
            if best_state is not None:
                self.model.load_state(best_state)
        if s.final_projection:
            self._project(train)
        if self.method.method == "ewc":
            self.ewc = ewc_accumulate(
                self.model, train.images, train.labels, self.ewc, self.method.ewc_max_samples, self.rng
            )
        if len(self.model.heads) > 1:
            logits = pn.predict_logits(self.model, task.val.images)
            self.compensation = compute_compensation(logits, self.model.head_slices(), self.u)
        else:
            self.compensation = None
        return TaskResult(head, pn.snapshot(self.model), history, best_epoch, stopped)


def _union(splits: list[Split]) -> Split:
    return Split(np.concatenate([s.images for s in splits]), np.concatenate([s.labels for s in splits]))


def train_task(engine: ContinualEngine, task: TaskSpec) -> TaskResult:
    return engine.train_task(task)


# ---------------------------------------------------------------- experiment

@dataclass
class Episode:
    task_id: int
    evaluation: M.EvalReport
    drift: M.DriftReport
    compensation: CompensationResult | None
    log: list[EpochLog]
    best_epoch: int | None
    stopped_early: bool


@dataclass
class ExperimentResult:
    method: MethodConfig
    episodes: list[Episode]
    history: list[pn.Snapshot]
    drift: M.DriftTable | None
    probes: dict[int, np.ndarray]

    @property
    def final(self) -> Episode:
        return self.episodes[-1]

    def average_incremental(self, mode: str) -> float:
        """Mean per-task accuracy after the final episode.

        ``mode`` is task_aware, task_agnostic, task_agnostic_comp or
        ``headline`` (task-agnostic, compensated when the method compensates).
        """
        ev = self.final.evaluation
        if mode == "headline":
            mode = "task_agnostic_comp" if self.method.uses_compensation else "task_agnostic"
        return M.average_incremental_accuracy(getattr(ev, mode))

    def per_episode_average(self, mode: str) -> float:
        return float(np.mean([M.average_incremental_accuracy(getattr(e.evaluation, mode)) for e in self.episodes]))

    def accuracy_matrix(self, mode: str) -> np.ndarray:
        n = len(self.episodes)
        out = np.full((n, n), np.nan)
        for e, ep in enumerate(self.episodes):
            row = getattr(ep.evaluation, mode)
            out[e, : len(row)] = row
        return out


def choose_probes(stream: TaskStream, per_task: int, seed: int) -> dict[int, np.ndarray]:
    rng = nx.make_rng(seed)
    probes = {}
    for t in stream:
        n = len(t.test)
        pick = np.sort(rng.choice(n, size=min(per_task, n), replace=False))
        probes[t.task_id] = t.test.images[pick]
    return probes


def evaluate(engine: ContinualEngine, episode: int) -> M.EvalReport:
    seen = engine.seen
    aware = M.task_accuracies(engine.model, seen, "task_aware")
    agnostic = M.task_accuracies(engine.model, seen, "task_agnostic")
    comp = engine.compensation
    agnostic_comp = agnostic if comp is None else M.task_accuracies(engine.model, seen, "task_agnostic", comp)
    return M.EvalReport(episode, aware, agnostic, agnostic_comp)


def run_experiment(
    stream: TaskStream,
    engine: ContinualEngine,
    probes_per_task: int = 20,
    percentile: float = 95.0,
    probe_seed: int = 0,
    on_episode=None,
) -> ExperimentResult:
    """Train every task in order, evaluating all seen tasks after each one.

    ``on_episode`` is called with each finished Episode (used to flush partial
    reports).
    """
    probes = choose_probes(stream, probes_per_task, probe_seed)
    episodes, history = [], []
    all_probes = lambda upto: np.concatenate([probes[t] for t in range(1, upto + 1)])  # noqa: E731
    for task in stream:
        before = pn.snapshot(engine.model) if engine.model.heads else None
        result = engine.train_task(task)
        history.append(result.snapshot)
        if before is not None:
            drift = M.drift_report(before, result.snapshot, all_probes(task.task_id - 1), task.task_id, percentile)
        else:
            drift = M.DriftReport(task.task_id, percentile, np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0, int))
        episode = Episode(
            task.task_id, evaluate(engine, task.task_id), drift, engine.compensation,
            result.log, result.best_epoch, result.stopped_early,
        )
        episodes.append(episode)
        if on_episode is not None:
            on_episode(episode)
    table = M.drift_table(history, probes, percentile)
    return ExperimentResult(engine.method, episodes, history, table, probes)
