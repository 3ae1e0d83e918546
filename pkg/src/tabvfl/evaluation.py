"""Latent-quality evaluation: designs, probes, metrics, experiment runners.

The four designs wire the same TabNet parts differently:

* ``CT``        one monolithic model over all features (non-federated),
* ``LT``        per-guest local autoencoders, finetuning trains only one
                host FC on the concatenated (frozen) guest latents,
* ``TabVFL-LE`` full encoders at the guests, host aggregates decision
                steps / latents by summation,
* ``TabVFL``    the split design: guest extractors, host encoder+decoder.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, relu, softmax_rows
from .data import DataSplits, PreparedDataset, partition_blocks, split_and_batch
from .errors import ConfigError, DataError
from .nn_core import Adam, Linear, cross_entropy, reconstruction_loss
from .protocol import FailureSchedule, Federation, wire_federation
from .tabnet import (
    MonolithicTabNet,
    PartialEncoder,
    TabNetConfig,
    build_model_parts,
    le_aggregate,
)

DESIGNS = ("CT", "LT", "TabVFL-LE", "TabVFL")

REPORT_COLUMNS = ("design", "dataset", "seed", "probe", "accuracy", "f1",
                  "roc_auc", "runtime_s", "bytes_sent", "bytes_received")


def child_seed(seed: int, tag: str) -> int:
    """Deterministic per-purpose sub-seed."""
    digest = [seed] + [ord(c) for c in tag]
    return int(np.random.SeedSequence(digest).generate_state(1)[0])


@dataclass
class ExperimentSpec:
    """One experiment: dataset x design(s) x hyperparameters x seeds."""

    dataset: PreparedDataset
    dataset_name: str
    tabnet: TabNetConfig
    n_guests: int
    pretrain_epochs: int
    finetune_epochs: int
    batch_size: int
    seeds: list[int]
    patience: int | None = None
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    strategy: str = "none"
    p_fail_grid: tuple[float, ...] = (0.2, 0.35, 0.5)
    failure_runs: int = 8
    transport: str = "in_process"

    def validate(self):
        if not self.seeds:
            raise ConfigError("seeds list must not be empty")
        if any(not 0.0 <= p <= 1.0 for p in self.p_fail_grid):
            raise ConfigError("p_fail grid values must lie in [0, 1]")
        if self.n_guests < 1:
            raise ConfigError("need at least one guest")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1 when set")
        self.tabnet.validate(n_guests=self.n_guests)


@dataclass
class MetricsRow:
    design: str
    dataset: str
    seed: int
    probe: str
    accuracy: float
    f1: float
    roc_auc: float
    runtime_s: float
    bytes_sent: int
    bytes_received: int

    def __post_init__(self):
        for name in ("accuracy", "f1", "roc_auc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} out of [0, 1]: {v}")


class EarlyStopper:
    """Stops after ``patience`` consecutive epochs without improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience = patience
        self.best = np.inf
        self.epochs_since_improvement = 0

    def update(self, score: float) -> bool:
        """Record one epoch's validation score; True means stop now."""
        if score < self.best:
            self.best = score
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience


# --------------------------------------------------------------------------
# metrics

def accuracy_score(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    return float((y_true == y_pred).mean())


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> float:
    """Unweighted mean F1 over the classes present in the true labels."""
    scores = []
    for c in range(n_classes):
        if not np.any(y_true == c):
            warnings.warn(f"class {c} absent from test labels; skipped in macro F1")
            continue
        tp = float(np.sum((y_pred == c) & (y_true == c)))
        fp = float(np.sum((y_pred == c) & (y_true != c)))
        fn = float(np.sum((y_pred != c) & (y_true == c)))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom > 0 else 0.0)
    if not scores:
        raise DataError("no classes present in test labels")
    return float(np.mean(scores))


def binary_roc_auc(scores: np.ndarray, is_positive: np.ndarray) -> float | None:
    """Trapezoidal area under the ROC curve; ties grouped per threshold.

    Returns None when either class is empty (AUC undefined).
    """
    pos = float(is_positive.sum())
    neg = float(len(is_positive) - pos)
    if pos == 0 or neg == 0:
        return None
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_pos = is_positive[order].astype(np.float64)
    tp_cum = np.cumsum(sorted_pos)
    fp_cum = np.cumsum(1.0 - sorted_pos)
    # keep only the last index of each tied score group
    boundary = np.flatnonzero(np.diff(sorted_scores) != 0.0)
    keep = np.concatenate([boundary, [len(sorted_scores) - 1]])
    tpr = np.concatenate([[0.0], tp_cum[keep] / pos])
    fpr = np.concatenate([[0.0], fp_cum[keep] / neg])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_auc_ovr_macro(y_true: np.ndarray, scores: np.ndarray,
                      n_classes: int) -> float:
    """Macro one-vs-rest ROC AUC over classes with defined curves."""
    aucs = []
    for c in range(n_classes):
        auc = binary_roc_auc(scores[:, c], y_true == c)
        if auc is None:
            warnings.warn(f"class {c} lacks positives or negatives; skipped in AUC")
            continue
        aucs.append(auc)
    if not aucs:
        raise DataError("ROC AUC undefined for every class")
    return float(np.mean(aucs))


def compute_metrics(y_true: np.ndarray, y_pred: np.ndarray,
                    scores: np.ndarray, n_classes: int) -> tuple[float, float, float]:
    """(accuracy, macro F1, macro OVR ROC AUC) for one probe's outputs."""
    return (accuracy_score(y_true, y_pred),
            macro_f1(y_true, y_pred, n_classes),
            roc_auc_ovr_macro(y_true, scores, n_classes))


# --------------------------------------------------------------------------
# downstream probes

class _Standardizer:
    def __init__(self, x: np.ndarray):
        self.mean = x.mean(axis=0, keepdims=True)
        std = x.std(axis=0, keepdims=True)
        self.std = np.where(std < 1e-8, 1.0, std)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


class LogisticProbe:
    """Multinomial logistic regression, full-batch gradient descent."""

    def __init__(self, x: np.ndarray, y: np.ndarray, n_classes: int,
                 lr: float = 0.1, max_iter: int = 2000, tol: float = 1e-5):
        self.scale = _Standardizer(x)
        xs = self.scale(x)
        n, d = xs.shape
        self.w = np.zeros((d, n_classes))
        self.b = np.zeros((1, n_classes))
        onehot = np.eye(n_classes)[y]
        for _ in range(max_iter):
            p = softmax_rows(xs @ self.w + self.b)
            gw = xs.T @ (p - onehot) / n
            gb = (p - onehot).mean(axis=0, keepdims=True)
            if max(np.abs(gw).max(), np.abs(gb).max()) < tol:
                break
            self.w -= lr * gw
            self.b -= lr * gb

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        scores = softmax_rows(self.scale(x) @ self.w + self.b)
        return scores.argmax(axis=1), scores


class MLPProbe:
    """One hidden layer (64 ReLU units) trained with full-batch Adam."""

    def __init__(self, x: np.ndarray, y: np.ndarray, n_classes: int,
                 seed: int = 0, hidden: int = 64, iters: int = 300,
                 lr: float = 0.01):
        self.scale = _Standardizer(x)
        xs = self.scale(x)
        rng = np.random.default_rng(seed)
        self.l1 = Linear(xs.shape[1], hidden, rng, "probe.l1")
        self.l2 = Linear(hidden, n_classes, rng, "probe.l2")
        opt = Adam(self.l1.parameters() + self.l2.parameters(), lr=lr)
        for _ in range(iters):
            opt.zero_grad()
            logits = self.l2(relu(self.l1(Tensor(xs))))
            loss = cross_entropy(logits, y)
            loss.backward()
            opt.step()

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        logits = self.l2(relu(self.l1(Tensor(self.scale(x))))).data
        scores = softmax_rows(logits)
        return scores.argmax(axis=1), scores


def train_probes(latent_train: np.ndarray, y_train: np.ndarray,
                 n_classes: int, seed: int) -> dict:
    """Fit the linear and nonlinear probes on the latent training split."""
    present = np.unique(y_train)
    if len(present) < 2:
        raise DataError("probe training needs at least two classes present")
    return {
        "logistic": LogisticProbe(latent_train, y_train, n_classes),
        "mlp": MLPProbe(latent_train, y_train, n_classes, seed=seed),
    }


def latent_split(latents: np.ndarray, labels: np.ndarray,
                 rng: np.random.Generator):
    """Shuffled 70/30 split of the latent set; labels travel with rows."""
    n = latents.shape[0]
    if n < 10:
        raise DataError("latent set too small to split")
    perm = rng.permutation(n)
    n_train = int(np.floor(0.7 * n))
    tr, te = perm[:n_train], perm[n_train:]
    return latents[tr], labels[tr], latents[te], labels[te]


# --------------------------------------------------------------------------
# design wiring

@dataclass
class TrainLogEntry:
    phase: str
    epoch: int
    train_loss: float
    val_loss: float
    offline: tuple[int, ...] = ()
    accuracy: float | None = None


class DesignRuntime:
    """A trained (or trainable) wiring of one design instance."""

    design: str

    def __init__(self, spec: ExperimentSpec, seed: int):
        self.spec = spec
        self.seed = seed
        self.splits: DataSplits = split_and_batch(
            spec.dataset, spec.ratios, spec.batch_size, shuffle=False,
            rng=np.random.default_rng(child_seed(seed, "split")))
        widths_blocks = [b.width for b in spec.dataset.blocks]
        self.feature_ranges = partition_blocks(widths_blocks, spec.n_guests)
        self.widths = [b - a for a, b in self.feature_ranges]
        config = replace(spec.tabnet, n_classes=spec.dataset.n_classes)
        config.validate(n_guests=spec.n_guests)
        self.config = config
        self.finetuned = False
        self.log: list[TrainLogEntry] = []
        self._val_mask_seed = child_seed(seed, "val-masks")

    # interface implemented by subclasses ---------------------------------
    def pretrain_epoch(self, epoch: int):
        raise NotImplementedError

    def finetune_epoch(self, epoch: int):
        raise NotImplementedError

    def val_pretrain_loss(self) -> float:
        raise NotImplementedError

    def val_finetune_loss(self) -> float:
        raise NotImplementedError

    def latents(self, features: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def party_modules(self) -> dict[int, list]:
        raise NotImplementedError

    def party_states(self) -> dict[int, list[tuple[str, np.ndarray]]]:
        states = {}
        for pid, modules in self.party_modules().items():
            entries = []
            seen = set()
            for m in modules:
                for name, mat in m.named_state():
                    if name not in seen:
                        seen.add(name)
                        entries.append((name, mat))
            states[pid] = entries
        return states

    def restore(self, states: dict[int, dict[str, np.ndarray]]):
        """Load per-party checkpoint matrices back into the model parts."""
        for pid, modules in self.party_modules().items():
            if pid not in states:
                raise DataError(f"missing checkpoint for party {pid}")
            for m in modules:
                m.load_state(states[pid])
        self.finetuned = True

    @property
    def bytes_sent(self) -> int:
        return 0

    @property
    def bytes_received(self) -> int:
        return 0

    def shutdown(self):
        pass

    # shared driver --------------------------------------------------------
    def fit(self):
        spec = self.spec
        stopper = EarlyStopper(spec.patience) if spec.patience else None
        for epoch in range(spec.pretrain_epochs):
            summary = self.pretrain_epoch(epoch)
            val = self.val_pretrain_loss()
            self.log.append(TrainLogEntry(
                "pretrain", epoch, summary.mean_loss, val,
                tuple(sorted(summary.offline))))
            if stopper and stopper.update(val):
                break
        stopper = EarlyStopper(spec.patience) if spec.patience else None
        for epoch in range(spec.finetune_epochs):
            summary = self.finetune_epoch(epoch)
            val = self.val_finetune_loss()
            self.log.append(TrainLogEntry(
                "finetune", epoch, summary.mean_loss, val,
                tuple(sorted(summary.offline)), summary.accuracy))
            if stopper and stopper.update(val):
                break
        self.finetuned = True
        return self

    def extract_latents(self, features: np.ndarray | None = None) -> np.ndarray:
        """Inference-mode latents for every row, in original row order."""
        if not self.finetuned:
            raise DataError("extract_latents requires a finetuned model")
        if features is None:
            features = self.spec.dataset.features
        return self.latents(features)


class _EpochLike:
    def __init__(self, losses, offline=(), accuracy=None):
        self.batch_losses = losses
        self.offline = frozenset(offline)
        self.accuracy = accuracy

    @property
    def mean_loss(self):
        return float(np.mean(self.batch_losses)) if self.batch_losses else float("nan")


class CentralRuntime(DesignRuntime):
    """CT: the whole model in one process, no federation."""

    design = "CT"

    def __init__(self, spec: ExperimentSpec, seed: int):
        super().__init__(spec, seed)
        parts = build_model_parts(self.config, [sum(self.widths)],
                                  child_seed(seed, "parts"))
        self.model = MonolithicTabNet(parts)

    def _bounds(self):
        return self.splits.batch_bounds

    def pretrain_epoch(self, epoch: int):
        x = self.splits.train.features
        losses = [self.model.pretrain_step(x[lo:hi]) for lo, hi in self._bounds()]
        return _EpochLike(losses)

    def finetune_epoch(self, epoch: int):
        x, y = self.splits.train.features, self.splits.train.labels
        losses, accs = [], []
        for lo, hi in self._bounds():
            loss, acc = self.model.finetune_step(x[lo:hi], y[lo:hi])
            losses.append(loss)
            accs.append(acc * (hi - lo))
        return _EpochLike(losses, accuracy=float(np.sum(accs) / x.shape[0]))

    def val_pretrain_loss(self) -> float:
        return self.model.validation_pretrain_loss(self.splits.val.features,
                                                   self._val_mask_seed)

    def val_finetune_loss(self) -> float:
        return self.model.validation_finetune_loss(self.splits.val.features,
                                                   self.splits.val.labels)

    def latents(self, features: np.ndarray) -> np.ndarray:
        return self.model.latents(features)

    def party_modules(self):
        return {1: list(self.model._modules)}


class FederatedRuntime(DesignRuntime):
    """Shared scaffolding for the three federated designs."""

    def __init__(self, spec: ExperimentSpec, seed: int,
                 schedule: FailureSchedule | None = None):
        super().__init__(spec, seed)
        self.schedule = schedule or FailureSchedule.never(spec.n_guests)
        self.guest_features = [
            np.ascontiguousarray(self.splits.train.features[:, a:b])
            for a, b in self.feature_ranges]
        self.federation: Federation | None = None

    def pretrain_epoch(self, epoch: int):
        return self.federation.run_pretrain_epoch(epoch)

    def finetune_epoch(self, epoch: int):
        return self.federation.run_finetune_epoch(epoch)

    @property
    def bytes_sent(self) -> int:
        return self.federation.bytes_sent

    @property
    def bytes_received(self) -> int:
        return self.federation.bytes_received

    def shutdown(self):
        if self.spec.transport == "socket":
            self.federation.shutdown()

    def _guest_cols(self, features: np.ndarray) -> list[np.ndarray]:
        return [np.ascontiguousarray(features[:, a:b])
                for a, b in self.feature_ranges]

    def _val_masks(self, shape_list: list[tuple[int, int]]) -> list[np.ndarray]:
        rng = np.random.default_rng(self._val_mask_seed)
        return [(rng.random(s) < self.config.p_mask).astype(np.float64)
                for s in shape_list]


class TabVFLRuntime(FederatedRuntime):
    design = "TabVFL"

    def __init__(self, spec: ExperimentSpec, seed: int,
                 schedule: FailureSchedule | None = None):
        super().__init__(spec, seed, schedule)
        self.parts = build_model_parts(self.config, self.widths,
                                       child_seed(seed, "parts"))
        self._direct = MonolithicTabNet(self.parts)  # same part objects
        self.federation = wire_federation(
            "tabvfl", self.parts, self.guest_features,
            self.splits.train.labels, self.splits.batch_bounds,
            strategy=spec.strategy, schedule=self.schedule,
            transport=spec.transport)

    def val_pretrain_loss(self) -> float:
        return self._direct.validation_pretrain_loss(self.splits.val.features,
                                                     self._val_mask_seed)

    def val_finetune_loss(self) -> float:
        return self._direct.validation_finetune_loss(self.splits.val.features,
                                                     self.splits.val.labels)

    def latents(self, features: np.ndarray) -> np.ndarray:
        return self._direct.latents(features)

    def party_modules(self):
        modules = {1: [self.parts.encoder, self.parts.decoder, self.parts.final]}
        for i, bottom in enumerate(self.parts.bottoms):
            modules[i + 2] = [bottom]
        return modules


class LocalEncodersRuntime(FederatedRuntime):
    """TabVFL-LE: complete encoders stay at the guests; the host sums."""

    design = "TabVFL-LE"

    def __init__(self, spec: ExperimentSpec, seed: int,
                 schedule: FailureSchedule | None = None):
        super().__init__(spec, seed, schedule)
        self.parts = build_model_parts(self.config, self.widths,
                                       child_seed(seed, "parts"))
        self.encoders = [
            PartialEncoder(w, self.config,
                           np.random.default_rng(child_seed(seed, f"le-enc{i}")),
                           f"guest{i + 2}.encoder")
            for i, w in enumerate(self.widths)]
        self.federation = wire_federation(
            "le", self.parts, self.guest_features,
            self.splits.train.labels, self.splits.batch_bounds,
            strategy=spec.strategy, schedule=self.schedule,
            transport=spec.transport, local_encoders=self.encoders)

    def _set_eval(self):
        for m in self.encoders + list(self.parts.bottoms):
            m.set_training(False)
        self.parts.decoder.set_training(False)
        self.parts.final.set_training(False)

    def val_pretrain_loss(self) -> float:
        self._set_eval()
        x = self.splits.val.features
        cols = self._guest_cols(x)
        masks = self._val_masks([c.shape for c in cols])
        per_guest_steps = []
        for bottom, enc, xc, s in zip(self.parts.bottoms, self.encoders,
                                      cols, masks):
            hidden = bottom.pretrain_forward(Tensor(xc * (1.0 - s)))
            out = enc(hidden, prior0=1.0 - s)
            per_guest_steps.append([d.data for d in out.step_outputs])
        aggregated = le_aggregate(per_guest_steps)
        out_int = self.parts.decoder([Tensor(a) for a in aggregated])
        total = 0.0
        for bottom, (a, b), xc, s in zip(self.parts.bottoms,
                                         self.parts.chunk_slices, cols, masks):
            recon = bottom.reconstruct(Tensor(out_int.data[:, a:b]))
            total += float(reconstruction_loss(xc, recon, s).data)
        return total

    def _latents_and_mask_loss(self, features: np.ndarray):
        self._set_eval()
        cols = self._guest_cols(features)
        z = None
        m_losses = []
        for bottom, enc, xc in zip(self.parts.bottoms, self.encoders, cols):
            out = enc(bottom.finetune_forward(Tensor(xc)))
            z = out.latents.data if z is None else z + out.latents.data
            m_losses.append(float(out.mask_loss.data))
        return z, float(np.mean(m_losses))

    def val_finetune_loss(self) -> float:
        z, m_loss = self._latents_and_mask_loss(self.splits.val.features)
        logits = self.parts.final(Tensor(z))
        ce = float(cross_entropy(logits, self.splits.val.labels).data)
        return ce - self.config.lambda_sparse * m_loss

    def latents(self, features: np.ndarray) -> np.ndarray:
        z, _ = self._latents_and_mask_loss(features)
        return z

    def party_modules(self):
        modules = {1: [self.parts.decoder, self.parts.final]}
        for i, (bottom, enc) in enumerate(zip(self.parts.bottoms, self.encoders)):
            modules[i + 2] = [bottom, enc]
        return modules


class LocalTabNetsRuntime(FederatedRuntime):
    """LT: local autoencoders per guest; host trains one FC on latents."""

    design = "LT"

    def __init__(self, spec: ExperimentSpec, seed: int,
                 schedule: FailureSchedule | None = None):
        super().__init__(spec, seed, schedule)
        self.parts = build_model_parts(self.config, self.widths,
                                       child_seed(seed, "parts"))
        self.local_models = []
        for i, w in enumerate(self.widths):
            a, b = self.parts.chunk_slices[i]
            local_cfg = replace(self.config, latent_dim=b - a)
            local_parts = build_model_parts(
                local_cfg, [w], child_seed(seed, f"lt-local{i}"),
                name_prefix=f"lt{i + 2}.")
            self.local_models.append(MonolithicTabNet(local_parts))
        self.federation = wire_federation(
            "lt", self.parts, self.guest_features,
            self.splits.train.labels, self.splits.batch_bounds,
            strategy=spec.strategy, schedule=self.schedule,
            transport=spec.transport, local_models=self.local_models,
            lt_latent_slices=self.parts.chunk_slices)

    def val_pretrain_loss(self) -> float:
        x = self.splits.val.features
        cols = self._guest_cols(x)
        return float(sum(
            model.validation_pretrain_loss(xc, self._val_mask_seed + i)
            for i, (model, xc) in enumerate(zip(self.local_models, cols))))

    def latents(self, features: np.ndarray) -> np.ndarray:
        cols = self._guest_cols(features)
        return np.concatenate(
            [model.latents(xc) for model, xc in zip(self.local_models, cols)],
            axis=1)

    def val_finetune_loss(self) -> float:
        z = self.latents(self.splits.val.features)
        self.parts.final.set_training(False)
        logits = self.parts.final(Tensor(z))
        return float(cross_entropy(logits, self.splits.val.labels).data)

    def party_modules(self):
        modules = {1: [self.parts.final]}
        for i, model in enumerate(self.local_models):
            modules[i + 2] = list(model._modules)
        return modules


_RUNTIMES = {
    "CT": CentralRuntime,
    "LT": LocalTabNetsRuntime,
    "TabVFL-LE": LocalEncodersRuntime,
    "TabVFL": TabVFLRuntime,
}


def build_design_runtime(spec: ExperimentSpec, design: str, seed: int,
                         schedule: FailureSchedule | None = None) -> DesignRuntime:
    if design not in _RUNTIMES:
        raise ConfigError(f"unknown design {design!r}; expected one of {DESIGNS}")
    spec.validate()
    if design == "CT":
        return CentralRuntime(spec, seed)
    return _RUNTIMES[design](spec, seed, schedule)


def extract_latents(runtime: DesignRuntime,
                    features: np.ndarray | None = None) -> np.ndarray:
    """Latents for the full row set from a finetuned design runtime."""
    return runtime.extract_latents(features)


# --------------------------------------------------------------------------
# experiment runners

def evaluate_latents(runtime: DesignRuntime, spec: ExperimentSpec, design: str,
                     seed: int, runtime_s: float) -> list[MetricsRow]:
    """Latent split -> probes -> metrics; emits per-probe rows plus a mean."""
    latents = runtime.extract_latents()
    labels = spec.dataset.labels
    ztr, ytr, zte, yte = latent_split(
        latents, labels, np.random.default_rng(child_seed(seed, "latent-split")))
    probes = train_probes(ztr, ytr, spec.dataset.n_classes,
                          child_seed(seed, "probes"))
    rows = []
    metric_stack = []
    for name in sorted(probes):
        pred, scores = probes[name].predict(zte)
        acc, f1, auc = compute_metrics(yte, pred, scores, spec.dataset.n_classes)
        metric_stack.append((acc, f1, auc))
        rows.append(MetricsRow(design, spec.dataset_name, seed, name, acc, f1,
                               auc, runtime_s, runtime.bytes_sent,
                               runtime.bytes_received))
    means = np.mean(metric_stack, axis=0)
    rows.append(MetricsRow(design, spec.dataset_name, seed, "mean",
                           float(means[0]), float(means[1]), float(means[2]),
                           runtime_s, runtime.bytes_sent,
                           runtime.bytes_received))
    return rows


def run_design(spec: ExperimentSpec, design: str, seed: int,
               schedule: FailureSchedule | None = None,
               ) -> tuple[list[MetricsRow], DesignRuntime]:
    """Train one design end to end and evaluate its latent quality."""
    start = time.perf_counter()
    runtime = build_design_runtime(spec, design, seed, schedule)
    runtime.fit()
    elapsed = time.perf_counter() - start
    rows = evaluate_latents(runtime, spec, design, seed, elapsed)
    runtime.shutdown()
    return rows, runtime


@dataclass
class FailureCell:
    p_fail: float
    strategy: str
    rows: list[MetricsRow] = field(default_factory=list)

    def mean_f1(self) -> float:
        vals = [r.f1 for r in self.rows if r.probe == "mean"]
        return float(np.mean(vals))

    def std_f1(self) -> float:
        vals = [r.f1 for r in self.rows if r.probe == "mean"]
        return float(np.std(vals))


def run_failure_experiment(spec: ExperimentSpec,
                           ) -> tuple[list[FailureCell], dict]:
    """Grid of client-failure runs: baseline plus p x strategy cells.

    The failure schedule for a given (seed, p) is shared between the cache
    and zeros strategies so the two methods see identical offline patterns.
    """
    spec.validate()
    if spec.failure_runs < 1:
        raise ConfigError("failure experiment needs at least one run")
    seeds = list(spec.seeds[:spec.failure_runs])
    while len(seeds) < spec.failure_runs:
        seeds.append(child_seed(seeds[-1], f"extra-run{len(seeds)}"))
    baseline = FailureCell(0.0, "baseline")
    cells = [baseline]
    for seed in seeds:
        base_spec = replace(spec, strategy="none")
        rows, _ = run_design(base_spec, "TabVFL", seed)
        baseline.rows.extend(rows)
    for p in spec.p_fail_grid:
        for strategy in ("cache", "zeros"):
            cell = FailureCell(p, strategy)
            for seed in seeds:
                schedule = FailureSchedule(
                    p, spec.n_guests, child_seed(seed, f"failures-{p}"))
                cell_spec = replace(spec, strategy=strategy)
                rows, _ = run_design(cell_spec, "TabVFL", seed, schedule)
                cell.rows.extend(rows)
            cells.append(cell)
    summary = {
        f"p={cell.p_fail:g}/{cell.strategy}": {
            "mean_f1": cell.mean_f1(), "std_f1": cell.std_f1()}
        for cell in cells
    }
    return cells, summary


# --------------------------------------------------------------------------
# reports

def _format_float(v: float) -> str:
    return format(float(v), ".17g")


def report_csv_lines(rows: list[MetricsRow]) -> list[str]:
    lines = [",".join(REPORT_COLUMNS)]
    for r in rows:
        lines.append(",".join([
            r.design, r.dataset, str(r.seed), r.probe,
            _format_float(r.accuracy), _format_float(r.f1),
            _format_float(r.roc_auc), _format_float(r.runtime_s),
            str(r.bytes_sent), str(r.bytes_received)]))
    return lines


def report_json_text(rows: list[MetricsRow]) -> str:
    """JSON array with floats at 17 significant digits (lossless)."""
    out = ["["]
    for i, r in enumerate(rows):
        fields = [
            f'"design": {json.dumps(r.design)}',
            f'"dataset": {json.dumps(r.dataset)}',
            f'"seed": {r.seed}',
            f'"probe": {json.dumps(r.probe)}',
            f'"accuracy": {_format_float(r.accuracy)}',
            f'"f1": {_format_float(r.f1)}',
            f'"roc_auc": {_format_float(r.roc_auc)}',
            f'"runtime_s": {_format_float(r.runtime_s)}',
            f'"bytes_sent": {r.bytes_sent}',
            f'"bytes_received": {r.bytes_received}',
        ]
        comma = "," if i + 1 < len(rows) else ""
        out.append(" {" + ", ".join(fields) + "}" + comma)
    out.append("]")
    return "\n".join(out) + "\n"


def emit_report(rows: list[MetricsRow], csv_path=None, json_path=None):
    """Write the metric rows as CSV and/or JSON; byte-stable given rows."""
    if not rows:
        raise DataError("emit_report needs at least one row")
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write("\n".join(report_csv_lines(rows)) + "\n")
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            fh.write(report_json_text(rows))


def parse_report_csv(path) -> list[MetricsRow]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != ",".join(REPORT_COLUMNS):
        raise DataError(f"unexpected report header in {path}")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        rows.append(MetricsRow(parts[0], parts[1], int(parts[2]), parts[3],
                               float(parts[4]), float(parts[5]), float(parts[6]),
                               float(parts[7]), int(parts[8]), int(parts[9])))
    return rows
