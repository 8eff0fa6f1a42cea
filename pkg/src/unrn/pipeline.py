"""Source pretraining, teacher clustering and uncertainty-guided fine-tuning."""

from __future__ import annotations

import logging
import subprocess
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import OUTLIER, PseudoLabeledSet, cluster_centers, dbscan
from .encoder import AdamState, ModelParams, adam_step, backward_batch, encode, forward_batch, init_params
from .losses import (LossOutput, LossWeights, batch_hard_triplets, id_loss, reg_loss, source_id_loss,
                     total_target_loss, uct_loss, utri_loss)
from .mean_teacher import ema_update
from .memory_bank import MemoryBank
from .metrics import auroc, evaluate_retrieval
from .numerics import l2_normalize
from .synth import (CORRECT, WRONG, Dataset, ScenarioConfig, generate_eval_split, generate_scenario,
                    label_pseudo_correctness, philox, split_query_gallery)
from .uncertainty import (FEATURE_CONSISTENCY, MODES, ReferenceBank, build_reference_bank,
                          feature_consistency_batch, pair_weight, uncertainty_batch)

log = logging.getLogger(__name__)

UNCERTAINTY_MODES = MODES + (FEATURE_CONSISTENCY,)
ALL = -1  # bank capacity meaning "size of the target training set"


class DegenerateClusteringError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    # scenario
    n_source_ids: int = 15
    n_target_ids: int = 20
    samples_per_id: int = 30
    test_samples_per_id: int = 15
    input_dim: int = 16
    intra_class_spread: float = 0.1
    domain_shift: float = 1.5
    noise_boost_fraction: float = 0.3
    prototype_max_cos: float = 0.5
    signal_dim: int = 8
    nuisance_spread: float = 0.4
    offset_ratio: float = 0.25
    # encoder
    hidden_dim: int = 32
    feature_dim: int = 16
    # schedule
    pretrain_epochs: int = 30
    pretrain_iters: int = 30
    rounds: int = 3
    epochs_per_round: int = 1
    iters_per_epoch: int = 150
    P: int = 4
    K: int = 4
    # optimizer
    lr: float = 0.0035
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # clustering / teacher
    dbscan_eps: float = 0.15
    min_pts: int = 4
    ema_alpha: float = 0.99
    # losses
    lambda_tri: float = 1.0
    lambda_ct: float = 0.05
    lambda_reg: float = 1.0
    source_weight: float = 1.0
    classifier_scale: float = 16.0
    circle_margin: float = 0.25
    circle_gamma: float = 32.0
    temperature: float = 0.02
    # uncertainty and ablation toggles
    uncertainty_mode: str = "R"
    use_source: bool = True
    use_ct: bool = True
    use_mean_teacher: bool = True
    use_uid: bool = True
    use_utri: bool = True
    use_uct: bool = True
    force_zero_uncertainty: bool = False
    bank_capacity: int = 512
    hist_bins: int = 20

    def validate(self) -> None:
        if self.uncertainty_mode not in UNCERTAINTY_MODES:
            raise ValueError(f"uncertainty_mode must be one of {UNCERTAINTY_MODES}")
        if min(self.P, self.K, self.min_pts, self.hidden_dim, self.feature_dim) < 1:
            raise ValueError("P, K, min_pts and network dims must be >= 1")
        if min(self.pretrain_epochs, self.pretrain_iters, self.rounds, self.epochs_per_round,
               self.iters_per_epoch) < 0:
            raise ValueError("schedule lengths must be >= 0")
        if not self.dbscan_eps > 0:
            raise ValueError("dbscan_eps must be positive")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must lie in [0, 1]")
        if self.lr < 0 or not self.temperature > 0:
            raise ValueError("lr must be >= 0 and temperature > 0")
        if self.bank_capacity < 0 and self.bank_capacity != ALL:
            raise ValueError("bank_capacity must be >= 0 or -1 (all)")
        LossWeights(self.lambda_tri, self.lambda_ct, self.lambda_reg)
        self.scenario().validate()

    def scenario(self) -> ScenarioConfig:
        return ScenarioConfig(
            n_source_ids=self.n_source_ids, n_target_ids=self.n_target_ids,
            samples_per_id=self.samples_per_id, input_dim=self.input_dim,
            intra_class_spread=self.intra_class_spread, domain_shift=self.domain_shift,
            noise_boost_fraction=self.noise_boost_fraction, seed=self.seed,
            test_samples_per_id=self.test_samples_per_id, prototype_max_cos=self.prototype_max_cos,
            signal_dim=self.signal_dim, nuisance_spread=self.nuisance_spread, offset_ratio=self.offset_ratio)

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.input_dim, self.hidden_dim, self.feature_dim)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_tri, self.lambda_ct, self.lambda_reg)

    @property
    def any_uncertainty(self) -> bool:
        return self.use_uid or self.use_utri or self.use_uct

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def field_types() -> dict[str, type]:
    return {f.name: type(getattr(TrainConfig(), f.name)) for f in fields(TrainConfig)}


# --------------------------------------------------------------------------
# training state
# --------------------------------------------------------------------------


@dataclass
class Optimizer:
    """ADAM hyper-parameters plus per-tensor-group state."""

    lr: float
    betas: tuple[float, float]
    eps: float
    states: dict = field(default_factory=dict)

    def step(self, key: str, params, grads):
        new, self.states[key] = adam_step(params, grads, self.states.get(key), self.lr, self.betas, self.eps)
        return new

    def reset(self, key: str) -> None:
        self.states.pop(key, None)

    @classmethod
    def from_config(cls, config: TrainConfig) -> "Optimizer":
        return cls(config.lr, (config.beta1, config.beta2), config.adam_eps)


@dataclass
class TrainState:
    student: ModelParams
    teacher: ModelParams
    source_classifier: np.ndarray
    target_classifier: np.ndarray | None
    optimizer: Optimizer
    bank: MemoryBank
    rng: np.random.Generator


def _pk_indices(rng, groups: list[np.ndarray], P: int, K: int) -> np.ndarray:
    chosen = rng.choice(len(groups), size=min(P, len(groups)), replace=False)
    out = []
    for g in np.sort(chosen):
        members = groups[g]
        out.append(rng.choice(members, size=K, replace=len(members) < K))
    return np.concatenate(out)


def _groups(labels) -> list[np.ndarray]:
    labels = np.asarray(labels)
    return [np.flatnonzero(labels == k) for k in np.unique(labels[labels != OUTLIER])]


# --------------------------------------------------------------------------
# stage 1: source pretraining
# --------------------------------------------------------------------------


def pretrain_source(config: TrainConfig, source: Dataset) -> tuple[ModelParams, np.ndarray]:
    """Train encoder and cosine classifier on labeled source data.

    Classifier rows start at the normalized class means of the initial
    features. Returns the student params and unit-norm class centers.
    """
    params = init_params(config.seed, config.dims)
    feats = encode(params, source.x)
    n_cls = int(source.true_ids.max()) + 1
    centers = np.stack([l2_normalize(feats[source.true_ids == c].mean(axis=0)) for c in range(n_cls)])
    if config.pretrain_epochs == 0:
        return params, centers
    opt = Optimizer.from_config(config)
    rng = philox(config.seed, "src_sample", 10_000)
    groups = _groups(source.true_ids)
    for _ in range(config.pretrain_epochs):
        for _ in range(config.pretrain_iters):
            idx = _pk_indices(rng, groups, config.P, config.K)
            f, cache = forward_batch(params, source.x[idx])
            out = source_id_loss(f, source.true_ids[idx], centers, config.classifier_scale)
            params = opt.step("student", params, backward_batch(params, cache, out.feature_grads))
            centers = opt.step("source_classifier", centers, out.aux_grads)
    return params, l2_normalize(centers)


def source_accuracy(params: ModelParams, centers: np.ndarray, data: Dataset) -> float:
    pred = np.argmax(encode(params, data.x) @ l2_normalize(centers).T, axis=1)
    return float(np.mean(pred == data.true_ids))


# --------------------------------------------------------------------------
# stage 2: clustering with the teacher
# --------------------------------------------------------------------------


def clustering_stage(teacher: ModelParams, target: Dataset, config: TrainConfig,
                     source_centers: np.ndarray) -> tuple[PseudoLabeledSet, ReferenceBank | None]:
    feats = encode(teacher, target.x)
    pseudo = dbscan(feats, config.dbscan_eps, config.min_pts, target.sample_ids)
    if pseudo.n_clusters == 0:
        raise DegenerateClusteringError(
            f"degenerate clustering: every sample is an outlier at eps={config.dbscan_eps}, "
            f"min_pts={config.min_pts}; increase eps or lower min_pts")
    pseudo.centers = cluster_centers(feats, pseudo.labels, pseudo.n_clusters)
    bank = None
    if config.uncertainty_mode != FEATURE_CONSISTENCY:
        bank = build_reference_bank(pseudo.centers, l2_normalize(source_centers), config.uncertainty_mode)
    return pseudo, bank


def compute_uncertainty(config: TrainConfig, ref_bank: ReferenceBank | None, f_student, f_teacher):
    if config.uncertainty_mode == FEATURE_CONSISTENCY:
        return feature_consistency_batch(f_student, f_teacher)
    return uncertainty_batch(ref_bank, f_student, f_teacher, config.temperature)


# --------------------------------------------------------------------------
# stage 3: joint fine-tuning
# --------------------------------------------------------------------------


def target_objective(config: TrainConfig, f_student, f_teacher, labels, sample_ids,
                     target_classifier, bank: MemoryBank, ref_bank: ReferenceBank | None):
    """Weighted target objective for one batch; returns (total, components, u, u_used)."""
    n = len(f_student)
    u, u_grad = compute_uncertainty(config, ref_bank, f_student, f_teacher)
    if config.force_zero_uncertainty:
        u_used, u_grad = np.zeros(n), np.zeros_like(u_grad)
    else:
        u_used = u
    omega = np.exp(-u_used)

    comps: dict[str, LossOutput] = {}
    comps["id"] = id_loss(f_student, labels, target_classifier, omega if config.use_uid else None,
                          config.classifier_scale)
    triplets = batch_hard_triplets(f_student, labels, sample_ids)
    if config.use_utri and len(triplets):
        a, p, q = triplets.T
        w_ap, w_an = pair_weight(u_used[a], u_used[p]), pair_weight(u_used[a], u_used[q])
    else:
        w_ap = w_an = None
    comps["tri"] = utri_loss(f_student, triplets, w_ap, w_an)
    if config.use_ct:
        comps["ct"] = uct_loss(f_student, labels, u_used if config.use_uct else np.zeros(n), bank,
                               config.circle_margin, config.circle_gamma, weighted=config.use_uct)
    if config.any_uncertainty and config.lambda_reg > 0:
        comps["reg"] = reg_loss(u_used, u_grad)
    return total_target_loss(comps, config.loss_weights), comps, u, u_used


def finetune_epoch(state: TrainState, pseudo: PseudoLabeledSet, ref_bank: ReferenceBank | None,
                   source: Dataset, target: Dataset, config: TrainConfig) -> dict:
    """Run ``iters_per_epoch`` PK iterations; mutates ``state`` and returns mean stats."""
    groups = _groups(pseudo.labels)
    src_groups = _groups(source.true_ids)
    sums = {"loss_id": 0.0, "loss_tri": 0.0, "loss_ct": 0.0, "loss_reg": 0.0, "loss_source": 0.0,
            "loss_total": 0.0, "batch_mean_u": 0.0}
    for _ in range(config.iters_per_epoch):
        idx = _pk_indices(state.rng, groups, config.P, config.K)
        labels = pseudo.labels[idx]
        fs, cache = forward_batch(state.student, target.x[idx])
        ft = encode(state.teacher, target.x[idx])
        total, comps, u, u_used = target_objective(config, fs, ft, labels, target.sample_ids[idx],
                                                   state.target_classifier, state.bank, ref_bank)
        grads = backward_batch(state.student, cache, total.feature_grads)
        loss_source = 0.0
        if config.use_source:
            sidx = _pk_indices(state.rng, src_groups, config.P, config.K)
            fsrc, scache = forward_batch(state.student, source.x[sidx])
            src = source_id_loss(fsrc, source.true_ids[sidx], state.source_classifier, config.classifier_scale)
            grads = grads + backward_batch(state.student, scache, config.source_weight * src.feature_grads)
            state.source_classifier = state.optimizer.step(
                "source_classifier", state.source_classifier, config.source_weight * src.aux_grads)
            loss_source = src.value

        teacher_sum = state.teacher.checksum()
        state.student = state.optimizer.step("student", state.student, grads)
        state.target_classifier = state.optimizer.step("target_classifier", state.target_classifier,
                                                       total.aux_grads)
        if state.teacher.checksum() != teacher_sum:
            raise RuntimeError("teacher parameters changed during an optimizer step")
        alpha = config.ema_alpha if config.use_mean_teacher else 0.0
        state.teacher = ema_update(state.teacher, state.student, alpha)
        if config.use_ct:
            state.bank.push_batch(ft, labels, u_used)

        for name in ("id", "tri", "ct", "reg"):
            if name in comps:
                sums[f"loss_{name}"] += comps[name].value
        sums["loss_source"] += loss_source
        sums["loss_total"] += total.value + config.source_weight * loss_source
        sums["batch_mean_u"] += float(np.mean(u))
    n_it = max(config.iters_per_epoch, 1)
    stats = {k: v / n_it for k, v in sums.items()}
    stats.update(uncertainty_report(state, pseudo, ref_bank, target, config))
    return stats


def uncertainty_report(state: TrainState, pseudo: PseudoLabeledSet, ref_bank, target: Dataset,
                       config: TrainConfig) -> dict:
    """Per-sample u over the clustered target set, split by pseudo-label correctness."""
    tags = label_pseudo_correctness(target.true_ids, pseudo)
    mask = tags != "outlier"
    fs = encode(state.student, target.x[mask])
    ft = encode(state.teacher, target.x[mask])
    u, _ = compute_uncertainty(config, ref_bank, fs, ft)
    wrong = tags[mask] == WRONG
    correct = tags[mask] == CORRECT
    return {
        "n_clustered": int(mask.sum()),
        "n_wrong": int(wrong.sum()),
        "wrong_label_rate": float(wrong.mean()) if mask.any() else 0.0,
        "mean_u_correct": float(u[correct].mean()) if correct.any() else float("nan"),
        "mean_u_wrong": float(u[wrong].mean()) if wrong.any() else float("nan"),
        "auroc_u_wrong": auroc(u, wrong),
        "_u": u,
        "_wrong": wrong,
    }


def uncertainty_histogram(u, wrong, bins: int = 20) -> list[dict]:
    """Counts and densities of u for correct and wrong pseudo labels on shared bins."""
    u = np.asarray(u, dtype=np.float64)
    wrong = np.asarray(wrong, dtype=bool)
    hi = float(u.max()) if len(u) and u.max() > 0 else 1.0
    edges = np.linspace(0.0, hi, bins + 1)
    c_correct, _ = np.histogram(u[~wrong], bins=edges)
    c_wrong, _ = np.histogram(u[wrong], bins=edges)
    width = np.diff(edges)
    d_correct = c_correct / (max(c_correct.sum(), 1) * width)
    d_wrong = c_wrong / (max(c_wrong.sum(), 1) * width)
    return [
        {"bin_lo": float(edges[i]), "bin_hi": float(edges[i + 1]),
         "count_correct": int(c_correct[i]), "count_wrong": int(c_wrong[i]),
         "density_correct": float(d_correct[i]), "density_wrong": float(d_wrong[i])}
        for i in range(bins)
    ]


def _evaluate(params: ModelParams, query: Dataset, gallery: Dataset) -> dict:
    mAP, cmc = evaluate_retrieval(encode(params, query.x), query.true_ids,
                                  encode(params, gallery.x), gallery.true_ids)
    return {"mAP": mAP, "cmc1": cmc[1], "cmc5": cmc[5], "cmc10": cmc[10]}


def build_git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True,
                             timeout=5, check=True)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def run_experiment(config: TrainConfig, return_state: bool = False):
    """Pretrain, alternate clustering and fine-tuning, then evaluate the teacher.

    The report is plain JSON-serializable data. With ``return_state`` the
    final :class:`TrainState` is returned as well.
    """
    config.validate()
    source, target = generate_scenario(config.scenario())
    query, gallery = split_query_gallery(generate_eval_split(config.scenario()))

    student, src_centers = pretrain_source(config, source)
    pre_metrics = _evaluate(student, query, gallery)
    capacity = len(target) if config.bank_capacity == ALL else config.bank_capacity
    state = TrainState(
        student=student, teacher=student.copy(), source_classifier=src_centers, target_classifier=None,
        optimizer=Optimizer.from_config(config), bank=MemoryBank(capacity, dim=config.feature_dim),
        rng=philox(config.seed, "tgt_sample", 10_000))

    rounds = []
    hist_u = hist_wrong = None
    for r in range(config.rounds):
        pseudo, ref_bank = clustering_stage(state.teacher, target, config, state.source_classifier)
        state.target_classifier = pseudo.centers.copy()
        state.optimizer.reset("target_classifier")
        # pseudo-label ids change between rounds, so queued entries are stale
        state.bank = MemoryBank(capacity, l2_normalize(state.source_classifier))
        epoch_stats = [finetune_epoch(state, pseudo, ref_bank, source, target, config)
                       for _ in range(config.epochs_per_round)]
        info = {"round": r + 1, "n_clusters": pseudo.n_clusters, "n_outliers": pseudo.n_outliers}
        if epoch_stats:
            last = epoch_stats[-1]
            if r == 0:
                hist_u, hist_wrong = last["_u"], last["_wrong"]
            info.update({k: v for k, v in last.items() if not k.startswith("_")})
        else:
            tags = label_pseudo_correctness(target.true_ids, pseudo)
            clustered = tags != "outlier"
            info["wrong_label_rate"] = float(np.mean(tags[clustered] == WRONG))
        log.info("round %d: %s", r + 1, info)
        rounds.append(info)

    final = _evaluate(state.teacher, query, gallery)
    report = {
        "version": __version__,
        "build": build_git_describe(),
        "config": asdict(config),
        "pretrain": pre_metrics,
        "final": final,
        "rounds": rounds,
        "histogram_round1": (uncertainty_histogram(hist_u, hist_wrong, config.hist_bins)
                             if hist_u is not None and len(hist_u) else []),
    }
    if return_state:
        return report, state
    return report


# --------------------------------------------------------------------------
# ablation tables
# --------------------------------------------------------------------------

_NO_U = dict(use_uid=False, use_utri=False, use_uct=False)
_SBASE = dict(use_source=True, use_ct=True, use_mean_teacher=True, **_NO_U)

LADDERS: dict[str, list[tuple[str, dict]]] = {
    "components": [
        ("Baseline", dict(use_source=False, use_ct=False, use_mean_teacher=False, **_NO_U)),
        ("+Source", dict(use_source=True, use_ct=False, use_mean_teacher=False, **_NO_U)),
        ("+Contrastive", dict(use_source=True, use_ct=True, use_mean_teacher=False, **_NO_U)),
        ("+MeanTeacher (SBase)", dict(_SBASE)),
        ("SBase w/ UID", dict(_SBASE, use_uid=True)),
        ("SBase w/ UTRI", dict(_SBASE, use_utri=True)),
        ("SBase w/ UID+UTRI", dict(_SBASE, use_uid=True, use_utri=True)),
        ("SBase w/ UID+UTRI+UCT", dict(_SBASE, use_uid=True, use_utri=True, use_uct=True)),
    ],
    "uncertainty": [
        ("SBase", dict(_SBASE)),
        ("UNRN w/o L_reg", dict(_SBASE, use_uid=True, use_utri=True, use_uct=True, lambda_reg=0.0)),
        ("UNRN-feat", dict(_SBASE, use_uid=True, use_utri=True, use_uct=True, uncertainty_mode="feat")),
        ("UNRN-R_s", dict(_SBASE, use_uid=True, use_utri=True, use_uct=True, uncertainty_mode="R_s")),
        ("UNRN-R_t", dict(_SBASE, use_uid=True, use_utri=True, use_uct=True, uncertainty_mode="R_t")),
        ("UNRN-R", dict(_SBASE, use_uid=True, use_utri=True, use_uct=True, uncertainty_mode="R")),
    ],
    "bank_size": [
        (f"N={name}", dict(use_source=True, use_ct=True, use_mean_teacher=False, bank_capacity=cap, **_NO_U))
        for name, cap in (("0", 0), ("64", 64), ("256", 256), ("512", 512), ("all", ALL))
    ],
}

ABLATION_COLUMNS = ("row", "seed", "mAP", "cmc1", "cmc5", "cmc10", "wrong_label_rate",
                    "mean_u_correct", "mean_u_wrong")


def run_ablation(base_config: TrainConfig, ladder: list[tuple[str, dict]] | str, seeds) -> list[dict]:
    """One run per (row, seed) plus a ``mean`` row per ladder entry."""
    if isinstance(ladder, str):
        ladder = LADDERS[ladder]
    seeds = list(seeds)
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    table = []
    for name, overrides in ladder:
        per_seed = []
        for seed in seeds:
            report = run_experiment(base_config.with_overrides(seed=seed, **overrides))
            last = report["rounds"][-1] if report["rounds"] else {}
            first = report["rounds"][0] if report["rounds"] else {}
            row = {"row": name, "seed": seed, **report["final"],
                   "wrong_label_rate": last.get("wrong_label_rate", float("nan")),
                   "mean_u_correct": first.get("mean_u_correct", float("nan")),
                   "mean_u_wrong": first.get("mean_u_wrong", float("nan"))}
            per_seed.append(row)
            table.append(row)
        mean_row = {"row": name, "seed": "mean"}
        for col in ABLATION_COLUMNS[2:]:
            mean_row[col] = float(np.nanmean([r[col] for r in per_seed])) if any(
                np.isfinite(r[col]) for r in per_seed) else float("nan")
        table.append(mean_row)
    return table
