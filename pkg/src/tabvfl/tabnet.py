"""TabNet model parts and their split across parties.

The same components serve four wirings: the distributed split design, the
central (monolithic) baseline, per-guest local models, and the variant
where guests keep full encoders and the host aggregates by summation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, check_matrix, concat_cols, mul, relu, slice_cols, softmax_rows
from .errors import ConfigError
from .nn_core import (
    Adam,
    BatchNorm,
    FeatureTransformer,
    Linear,
    Module,
    attentive_mask_step,
    cross_entropy,
    reconstruction_loss,
    sparsity_loss,
)


@dataclass
class TabNetConfig:
    """Architecture hyperparameters shared by every design.

    ``latent_dim`` doubles as both the decision and attention width
    (n_d = n_a), so encoder feature transformers emit 2*latent_dim
    columns and the latent vector is latent_dim wide.
    """

    latent_dim: int
    n_steps: int = 3
    gamma_relax: float = 1.3
    eps_mask: float = 1e-15
    lambda_sparse: float = 1e-3
    n_shared: int = 2
    n_independent: int = 2
    p_mask: float = 0.5
    n_classes: int = 2
    learning_rate: float = 0.02

    def validate(self, n_guests: int | None = None):
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.gamma_relax < 1.0:
            raise ConfigError("gamma_relax must be >= 1")
        if self.lambda_sparse < 0.0:
            raise ConfigError("lambda_sparse must be >= 0")
        if not 0.0 <= self.p_mask <= 1.0:
            raise ConfigError("p_mask must lie in [0, 1]")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.n_shared + self.n_independent < 1:
            raise ConfigError("need at least one feature-transformer block")
        if n_guests is not None and self.latent_dim < n_guests:
            raise ConfigError(
                f"latent_dim ({self.latent_dim}) must not be lower than the "
                f"number of guests ({n_guests})"
            )


class RandomObfuscator:
    """Non-learnable Bernoulli mask source used during pretraining.

    Mask convention: S = 1 marks an entry as masked-for-reconstruction;
    the extractor sees X * (1 - S).
    """

    def __init__(self, p_mask: float, rng: np.random.Generator):
        if not 0.0 <= p_mask <= 1.0:
            raise ConfigError("p_mask must lie in [0, 1]")
        self.p_mask = p_mask
        self.rng = rng

    def sample(self, shape: tuple[int, int]) -> np.ndarray:
        return (self.rng.random(shape) < self.p_mask).astype(np.float64)

    def apply(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = check_matrix(x, "obfuscator input")
        mask = self.sample(x.shape)
        return x * (1.0 - mask), mask


def random_obfuscator(x: np.ndarray, p_mask: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Functional form: returns (X * (1 - S), S) with S ~ Bernoulli(p_mask)."""
    return RandomObfuscator(p_mask, rng).apply(x)


class GuestBottom(Module):
    """Guest-side model: BN+FC extractor plus the reconstruction head.

    The pretraining and finetuning extractors share these weights, so the
    finetune handover preserves values bitwise by construction.
    """

    def __init__(self, n_features: int, chunk_width: int, p_mask: float,
                 rng: np.random.Generator, mask_rng: np.random.Generator,
                 name: str):
        super().__init__()
        self.n_features = n_features
        self.chunk_width = chunk_width
        self.bn = BatchNorm(n_features, name + ".bn")
        self.fc = Linear(n_features, n_features, rng, name + ".fc")
        self.rec = Linear(chunk_width, n_features, rng, name + ".rec")
        self.obfuscator = RandomObfuscator(p_mask, mask_rng)

    def extract(self, x) -> Tensor:
        """BN then FC; the FC guards privacy even when BN is an identity."""
        return self.fc(self.bn(x))

    def pretrain_forward(self, x_masked) -> Tensor:
        return self.extract(x_masked)

    def finetune_forward(self, x) -> Tensor:
        return self.extract(x)

    def reconstruct(self, chunk) -> Tensor:
        chunk_t = chunk if isinstance(chunk, Tensor) else Tensor(check_matrix(chunk, "decoder chunk"))
        if chunk_t.data.shape[1] != self.chunk_width:
            raise ValueError(
                f"decoder chunk width {chunk_t.data.shape[1]} != assigned {self.chunk_width}"
            )
        return self.rec(chunk_t)


@dataclass
class EncoderOutput:
    latents: Tensor
    step_outputs: list[Tensor]
    mask_loss: Tensor
    masks: list[Tensor] = field(default_factory=list)


class PartialEncoder(Module):
    """TabNet encoder without the initial BN (that layer lives at guests).

    Runs n_steps of attentive masking + feature transformation.  In
    pretraining the caller passes prior0 = 1 - S_complete so masked
    features are excluded from step-1 attention; finetuning uses an
    all-ones prior.
    """

    def __init__(self, input_dim: int, config: TabNetConfig,
                 rng: np.random.Generator, name: str):
        super().__init__()
        config.validate()
        self.input_dim = input_dim
        self.config = config
        hidden = 2 * config.latent_dim  # n_d + n_a
        self.shared_fcs = []
        for i in range(config.n_shared):
            d_in = input_dim if i == 0 else hidden
            self.shared_fcs.append(Linear(d_in, 2 * hidden, rng,
                                          f"{name}.shared_fc{i}"))
        self.initial_transformer = FeatureTransformer(
            input_dim, hidden, self.shared_fcs, config.n_independent, rng,
            f"{name}.initial")
        self.step_transformers = [
            FeatureTransformer(input_dim, hidden, self.shared_fcs,
                               config.n_independent, rng, f"{name}.step{s}")
            for s in range(config.n_steps)
        ]
        self.att_fcs = [Linear(config.latent_dim, input_dim, rng,
                               f"{name}.att{s}.fc")
                        for s in range(config.n_steps)]
        self.att_bns = [BatchNorm(input_dim, f"{name}.att{s}.bn")
                        for s in range(config.n_steps)]

    def __call__(self, x, prior0: np.ndarray | None = None) -> EncoderOutput:
        xt = x if isinstance(x, Tensor) else Tensor(check_matrix(x, "encoder input"))
        if xt.data.shape[1] != self.input_dim:
            raise ValueError(
                f"encoder input width {xt.data.shape[1]} != configured {self.input_dim}"
            )
        n_d = self.config.latent_dim
        if prior0 is None:
            prior = Tensor(np.ones_like(xt.data))
        else:
            prior = Tensor(check_matrix(prior0, "prior"))
        att = slice_cols(self.initial_transformer(xt), n_d, 2 * n_d)
        step_outputs: list[Tensor] = []
        masks: list[Tensor] = []
        for s in range(self.config.n_steps):
            mask, prior = attentive_mask_step(
                att, prior, self.att_fcs[s], self.att_bns[s],
                self.config.gamma_relax)
            masks.append(mask)
            masked_x = mul(mask, xt)
            out = self.step_transformers[s](masked_x)
            step_outputs.append(relu(slice_cols(out, 0, n_d)))
            att = slice_cols(out, n_d, 2 * n_d)
        latents = step_outputs[0]
        for d in step_outputs[1:]:
            latents = add(latents, d)
        mask_loss = sparsity_loss(masks, self.config.eps_mask)
        return EncoderOutput(latents, step_outputs, mask_loss, masks)


class PartialDecoder(Module):
    """TabNet decoder without the final FC (feature heads live at guests).

    One feature transformer per decision step (one shared + one
    step-specific GLU block each); outputs are summed, keeping the
    latent width regardless of the feature count.
    """

    def __init__(self, config: TabNetConfig, rng: np.random.Generator, name: str):
        super().__init__()
        width = config.latent_dim
        self.n_steps = config.n_steps
        self.shared_fcs = [Linear(width, 2 * width, rng, f"{name}.shared_fc0")]
        self.step_transformers = [
            FeatureTransformer(width, width, self.shared_fcs, 1, rng,
                               f"{name}.step{s}")
            for s in range(config.n_steps)
        ]

    def __call__(self, step_outputs: list) -> Tensor:
        if len(step_outputs) != self.n_steps:
            raise ValueError(
                f"decoder expects {self.n_steps} step outputs, got {len(step_outputs)}"
            )
        total = None
        for transformer, step in zip(self.step_transformers, step_outputs):
            st = step if isinstance(step, Tensor) else Tensor(check_matrix(step, "step output"))
            out = transformer(st)
            total = out if total is None else add(total, out)
        return total


class FinalMapping(Module):
    """Prediction head used in finetuning: one FC from latents to logits."""

    def __init__(self, latent_dim: int, n_classes: int,
                 rng: np.random.Generator, name: str):
        super().__init__()
        self.fc = Linear(latent_dim, n_classes, rng, name + ".fc")

    def __call__(self, latents) -> Tensor:
        return self.fc(latents)

    def predict(self, latents) -> tuple[np.ndarray, np.ndarray]:
        """Returns (logits, row-normalized probabilities)."""
        logits = self(latents).data
        return logits, softmax_rows(logits)


def partition_uniform(latent_dim: int, n_guests: int) -> list[tuple[int, int]]:
    """Contiguous column chunks in guest order, widths differing by <= 1.

    The first latent_dim mod n_guests guests receive the extra column.
    """
    if n_guests < 1:
        raise ConfigError("need at least one guest")
    if latent_dim < n_guests:
        raise ConfigError(
            f"latent_dim ({latent_dim}) smaller than the number of guests ({n_guests})"
        )
    base, extra = divmod(latent_dim, n_guests)
    chunks = []
    start = 0
    for i in range(n_guests):
        width = base + (1 if i < extra else 0)
        chunks.append((start, start + width))
        start += width
    return chunks


def concat_intermediate(parts: list[np.ndarray | None]) -> np.ndarray:
    """Column-wise concatenation in ascending guest order."""
    if any(p is None for p in parts):
        missing = [i for i, p in enumerate(parts) if p is None]
        raise ValueError(f"missing intermediate parts for guests at positions {missing}")
    mats = [check_matrix(p, f"part {i}") for i, p in enumerate(parts)]
    rows = {m.shape[0] for m in mats}
    if len(rows) != 1:
        raise ValueError(f"row-count mismatch across parts: {sorted(rows)}")
    return np.concatenate(mats, axis=1)


def le_aggregate(per_guest_steps: list[list[np.ndarray]]) -> list[np.ndarray]:
    """Sum decision-step outputs elementwise across guests."""
    if not per_guest_steps:
        raise ValueError("no guest step outputs to aggregate")
    n_steps = len(per_guest_steps[0])
    shapes = {tuple(m.shape) for steps in per_guest_steps for m in steps}
    if any(len(steps) != n_steps for steps in per_guest_steps):
        raise ValueError("step-count mismatch across guests")
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch across guest step outputs: {sorted(shapes)}")
    return [np.sum([steps[s] for steps in per_guest_steps], axis=0)
            for s in range(n_steps)]


@dataclass
class ModelParts:
    """All model parts of one experiment instance, before distribution."""

    config: TabNetConfig
    feature_slices: list[tuple[int, int]]
    chunk_slices: list[tuple[int, int]]
    bottoms: list[GuestBottom]
    encoder: PartialEncoder
    decoder: PartialDecoder
    final: FinalMapping

    @property
    def n_guests(self) -> int:
        return len(self.bottoms)

    @property
    def input_dim(self) -> int:
        return self.feature_slices[-1][1]


def build_model_parts(config: TabNetConfig, feature_widths: list[int],
                      seed: int, name_prefix: str = "") -> ModelParts:
    """Construct every part from one seed, with stable parameter ids.

    Building twice from the same arguments yields bitwise-identical
    weights, which is what the split-vs-monolithic oracle relies on.
    """
    config.validate(n_guests=len(feature_widths))
    root = np.random.SeedSequence(seed)
    children = root.spawn(2 * len(feature_widths) + 3)
    chunk_slices = partition_uniform(config.latent_dim, len(feature_widths))
    feature_slices = []
    start = 0
    for w in feature_widths:
        feature_slices.append((start, start + w))
        start += w
    bottoms = []
    for i, width in enumerate(feature_widths):
        gid = i + 2  # party ids: 1 = host, guests from 2
        bottoms.append(GuestBottom(
            width, chunk_slices[i][1] - chunk_slices[i][0], config.p_mask,
            np.random.default_rng(children[2 * i]),
            np.random.default_rng(children[2 * i + 1]),
            f"{name_prefix}guest{gid}.bottom"))
    encoder = PartialEncoder(start, config,
                             np.random.default_rng(children[-3]),
                             f"{name_prefix}host.encoder")
    decoder = PartialDecoder(config, np.random.default_rng(children[-2]),
                             f"{name_prefix}host.decoder")
    final = FinalMapping(config.latent_dim, config.n_classes,
                         np.random.default_rng(children[-1]),
                         f"{name_prefix}host.final")
    return ModelParts(config, feature_slices, chunk_slices, bottoms,
                      encoder, decoder, final)


class MonolithicTabNet:
    """The same parts wired in one process: CT baseline, LT local models,
    and the equivalence oracle for the split pipeline."""

    def __init__(self, parts: ModelParts):
        self.parts = parts
        modules: list[Module] = list(parts.bottoms) + [parts.encoder,
                                                       parts.decoder, parts.final]
        self._modules = modules
        params = []
        seen = set()
        for m in modules:
            for p in m.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    params.append(p)
        self.optimizer = Adam(params, lr=parts.config.learning_rate)
        self.finetuned = False

    def set_training(self, flag: bool):
        for m in self._modules:
            m.set_training(flag)

    def zero_grad(self):
        for m in self._modules:
            m.zero_grad()

    def _split_features(self, x: np.ndarray) -> list[np.ndarray]:
        x = check_matrix(x, "features")
        if x.shape[1] != self.parts.input_dim:
            raise ValueError(
                f"feature width {x.shape[1]} != configured {self.parts.input_dim}"
            )
        return [np.ascontiguousarray(x[:, a:b]) for a, b in self.parts.feature_slices]

    def pretrain_forward(self, x: np.ndarray,
                         masks: list[np.ndarray] | None = None):
        """Full autoencoding pass; returns (per-guest losses, per-guest
        reconstructions, the tape total loss)."""
        parts = self.parts
        locals_ = self._split_features(x)
        if masks is None:
            masks = [b.obfuscator.sample(xc.shape)
                     for b, xc in zip(parts.bottoms, locals_)]
        hidden = []
        for bottom, xc, s in zip(parts.bottoms, locals_, masks):
            hidden.append(bottom.pretrain_forward(Tensor(xc * (1.0 - s))))
        intermediate = concat_cols(hidden)
        mask_complete = np.concatenate(masks, axis=1)
        enc = parts.encoder(intermediate, prior0=1.0 - mask_complete)
        out_intermediate = parts.decoder(enc.step_outputs)
        losses, recons = [], []
        total = None
        for bottom, (a, b), xc, s in zip(parts.bottoms, parts.chunk_slices,
                                         locals_, masks):
            recon = bottom.reconstruct(slice_cols(out_intermediate, a, b))
            loss = reconstruction_loss(xc, recon, s)
            recons.append(recon)
            losses.append(loss)
            total = loss if total is None else add(total, loss)
        return losses, recons, total

    def pretrain_step(self, x: np.ndarray,
                      masks: list[np.ndarray] | None = None) -> float:
        self.set_training(True)
        self.zero_grad()
        _, _, total = self.pretrain_forward(x, masks)
        total.backward()
        self.optimizer.step()
        return float(total.data)

    def finetune_forward(self, x: np.ndarray):
        parts = self.parts
        locals_ = self._split_features(x)
        hidden = [b.finetune_forward(Tensor(xc))
                  for b, xc in zip(parts.bottoms, locals_)]
        intermediate = concat_cols(hidden)
        enc = parts.encoder(intermediate)
        logits = parts.final(enc.latents)
        return enc, logits

    def finetune_step(self, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
        self.set_training(True)
        self.zero_grad()
        enc, logits = self.finetune_forward(x)
        loss = cross_entropy(logits, y) - self.parts.config.lambda_sparse * enc.mask_loss
        loss.backward()
        self.optimizer.step()
        accuracy = float((logits.data.argmax(axis=1) == y).mean())
        return float(loss.data), accuracy

    def latents(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode latent vectors for arbitrary rows."""
        self.set_training(False)
        enc, _ = self.finetune_forward(x)
        return enc.latents.data

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        self.set_training(False)
        _, logits = self.finetune_forward(x)
        return softmax_rows(logits.data)

    def validation_pretrain_loss(self, x: np.ndarray, mask_seed: int) -> float:
        """Reconstruction loss on held-out rows with a fixed mask draw."""
        self.set_training(False)
        rng = np.random.default_rng(mask_seed)
        masks = [
            (rng.random((x.shape[0], b - a)) < self.parts.config.p_mask).astype(np.float64)
            for a, b in self.parts.feature_slices
        ]
        losses, _, total = self.pretrain_forward(x, masks)
        return float(total.data)

    def validation_finetune_loss(self, x: np.ndarray, y: np.ndarray) -> float:
        self.set_training(False)
        enc, logits = self.finetune_forward(x)
        loss = cross_entropy(logits, y) - self.parts.config.lambda_sparse * enc.mask_loss
        return float(loss.data)

    def named_state(self) -> list[tuple[str, np.ndarray]]:
        entries = []
        for m in self._modules:
            entries.extend(m.named_state())
        # shared FCs appear once per owning module already (dedup by name)
        seen = set()
        unique = []
        for name, mat in entries:
            if name not in seen:
                seen.add(name)
                unique.append((name, mat))
        return unique
