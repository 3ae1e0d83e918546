"""Differentiable building blocks: layers, losses, optimizer, checks.

All forward passes run on the tape from :mod:`tabvfl.autodiff`; calling
``backward`` on a loss populates ``Parameter.grad`` for :class:`Adam`.
Inference-mode forwards are plain deterministic functions of the weights.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add,
    check_matrix,
    cross_entropy_logits,
    div,
    log,
    matmul,
    mul,
    sigmoid,
    slice_cols,
    sparsemax,
    sqrt,
    sub,
    tmean,
    tsum,
)
from .errors import CheckpointFormatError

SQRT_HALF = float(np.sqrt(0.5))


class Module:
    """Lightweight container tracking parameters, state, and train mode."""

    def __init__(self):
        self.training = True

    def modules(self):
        """All sub-modules reachable from attributes (depth-first)."""
        out = []
        for _, value in vars(self).items():
            if isinstance(value, Module):
                out.append(value)
                out.extend(value.modules())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        out.append(item)
                        out.extend(item.modules())
        return out

    def parameters(self) -> list[Parameter]:
        """Unique trainable parameters, deduplicated for shared layers."""
        seen: set[int] = set()
        out: list[Parameter] = []
        for owner in [self] + self.modules():
            for _, value in vars(owner).items():
                if isinstance(value, Parameter) and id(value) not in seen:
                    seen.add(id(value))
                    out.append(value)
        return out

    def named_state(self) -> list[tuple[str, np.ndarray]]:
        """Parameters plus non-trainable stats, as (id, matrix) pairs."""
        entries = [(p.name, p.data) for p in self.parameters()]
        seen: set[int] = set()
        for owner in [self] + self.modules():
            if isinstance(owner, BatchNorm) and id(owner) not in seen:
                seen.add(id(owner))
                entries.append((owner.name + ".running_mean", owner.running_mean))
                entries.append((owner.name + ".running_var", owner.running_var))
        return entries

    def load_state(self, state: dict[str, np.ndarray]):
        """Restore values saved by :meth:`named_state`; shapes must match."""
        for name, _ in self.named_state():
            if name not in state:
                raise CheckpointFormatError(f"missing entry {name!r} in checkpoint")
        for p in self.parameters():
            value = state[p.name]
            if value.shape != p.data.shape:
                raise CheckpointFormatError(
                    f"shape mismatch for {p.name!r}: {value.shape} vs {p.data.shape}"
                )
            p.data = value.copy()
        for owner in [self] + self.modules():
            if isinstance(owner, BatchNorm):
                owner.running_mean = state[owner.name + ".running_mean"].copy()
                owner.running_var = state[owner.name + ".running_var"].copy()

    def set_training(self, flag: bool):
        self.training = flag
        for m in self.modules():
            m.training = flag

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def fc_forward(x, weight: Parameter, bias: Parameter | None = None) -> Tensor:
    """Affine map y = x W + b with b broadcast over rows."""
    xt = x if isinstance(x, Tensor) else Tensor(check_matrix(x, "fc input"))
    if xt.data.ndim != 2 or xt.data.shape[1] != weight.data.shape[0]:
        raise ValueError(
            f"fc shape mismatch: input {xt.data.shape} vs weight {weight.data.shape}"
        )
    out = matmul(xt, weight)
    if bias is not None:
        if bias.data.shape != (1, weight.data.shape[1]):
            raise ValueError(
                f"fc bias shape {bias.data.shape} != (1, {weight.data.shape[1]})"
            )
        out = add(out, bias)
    return out


class Linear(Module):
    """Fully connected layer with uniform +-1/sqrt(d_in) init."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 name: str, bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (d_in, d_out)),
                                name + ".weight")
        self.bias = (Parameter(rng.uniform(-bound, bound, (1, d_out)),
                               name + ".bias") if bias else None)

    def __call__(self, x) -> Tensor:
        return fc_forward(x, self.weight, self.bias)


class BatchNorm(Module):
    """1-D batch normalization over feature columns.

    Training mode normalizes by batch population statistics and updates
    the running stats with momentum; inference mode uses running stats
    only and is deterministic.
    """

    # eps keeps zero-variance columns finite while being small enough that
    # any column with variance >= 1e-4 still normalizes to unit variance
    # within 1e-6
    def __init__(self, dim: int, name: str, momentum: float = 0.1,
                 eps: float = 1e-12):
        super().__init__()
        if not 0.0 < momentum <= 1.0:
            raise ValueError("momentum must be in (0, 1]")
        self.name = name
        self.gamma = Parameter(np.ones((1, dim)), name + ".gamma")
        self.beta = Parameter(np.zeros((1, dim)), name + ".beta")
        self.running_mean = np.zeros((1, dim))
        self.running_var = np.ones((1, dim))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x) -> Tensor:
        xt = x if isinstance(x, Tensor) else Tensor(check_matrix(x, "batchnorm input"))
        batch = xt.data.shape[0]
        if batch == 0:
            raise ValueError("batchnorm: empty batch")
        if self.training:
            if batch < 2:
                raise ValueError("batchnorm training mode needs batch size >= 2")
            mu = tmean(xt, axis=0, keepdims=True)
            centered = sub(xt, mu)
            var = tmean(mul(centered, centered), axis=0, keepdims=True)
            std = sqrt(add(var, self.eps))
            normed = div(centered, std)
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mu.data
            self.running_var = (1.0 - m) * self.running_var + m * var.data
        else:
            scale = 1.0 / np.sqrt(self.running_var + self.eps)
            normed = mul(sub(xt, Tensor(self.running_mean)), Tensor(scale))
        return add(mul(normed, self.gamma), self.beta)


def batchnorm_forward(x, state: BatchNorm) -> Tensor:
    """Functional form of :class:`BatchNorm`: normalize x under its state."""
    return state(x)


class GLUBlock(Module):
    """FC(d -> 2h) -> BN -> GLU; the FC may be shared across transformers."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 name: str, shared_fc: Linear | None = None):
        super().__init__()
        self.d_out = d_out
        self.fc = shared_fc if shared_fc is not None else Linear(
            d_in, 2 * d_out, rng, name + ".fc")
        if self.fc.weight.data.shape != (d_in, 2 * d_out):
            raise ValueError(
                f"shared fc shape {self.fc.weight.data.shape} incompatible with "
                f"block ({d_in}, {2 * d_out})"
            )
        self.bn = BatchNorm(2 * d_out, name + ".bn")

    def __call__(self, x) -> Tensor:
        pre = self.bn(self.fc(x))
        left = slice_cols(pre, 0, self.d_out)
        right = slice_cols(pre, self.d_out, 2 * self.d_out)
        return mul(left, sigmoid(right))


class FeatureTransformer(Module):
    """Chain of GLU blocks with sqrt(0.5)-scaled residual connections.

    The first ``len(shared_fcs)`` blocks reuse the given FC layers (their
    batch norms stay per-transformer); the remaining ``n_independent``
    blocks own their weights.
    """

    def __init__(self, d_in: int, d_out: int, shared_fcs: list[Linear],
                 n_independent: int, rng: np.random.Generator, name: str):
        super().__init__()
        if len(shared_fcs) + n_independent < 1:
            raise ValueError("feature transformer needs at least one block")
        self.blocks = []
        width = d_in
        for i, fc in enumerate(shared_fcs):
            self.blocks.append(GLUBlock(width, d_out, rng,
                                        f"{name}.shared{i}", shared_fc=fc))
            width = d_out
        for i in range(n_independent):
            self.blocks.append(GLUBlock(width, d_out, rng, f"{name}.indep{i}"))
            width = d_out

    def __call__(self, x) -> Tensor:
        out = self.blocks[0](x)
        for block in self.blocks[1:]:
            out = mul(add(out, block(out)), SQRT_HALF)
        return out


def glu_feature_transformer(x, transformer: FeatureTransformer) -> Tensor:
    """Functional form of :class:`FeatureTransformer`: run the block chain."""
    return transformer(x)


def attentive_mask_step(a_prev, prior, fc: Linear, bn: BatchNorm,
                        gamma_relax: float) -> tuple[Tensor, Tensor]:
    """One attention step: mask = sparsemax(prior * BN(FC(a_prev))).

    Returns (mask, next prior) with prior_next = prior * (gamma - mask).
    Priors must stay non-negative; entries may exceed gamma after several
    steps because the relaxation compounds multiplicatively.
    """
    prior_t = prior if isinstance(prior, Tensor) else Tensor(prior)
    if np.any(prior_t.data < 0.0):
        raise ValueError("attentive step: prior entries must be >= 0")
    logits = mul(bn(fc(a_prev)), prior_t)
    # A prior of exactly zero excludes the feature outright: project onto
    # the matching simplex face so the mask entry cannot resurface.
    mask = sparsemax(logits, exclude=prior_t.data == 0.0)
    prior_next = mul(prior_t, sub(Tensor(np.full((), gamma_relax)), mask))
    return mask, prior_next


def sparsity_loss(masks: list, eps: float) -> Tensor:
    """Mean negative mask entropy: (1/(S*B)) sum M*log(M+eps); always <= 0."""
    if not masks:
        raise ValueError("sparsity_loss needs at least one mask")
    total = None
    for mask in masks:
        m = mask if isinstance(mask, Tensor) else Tensor(mask)
        term = tmean(tsum(mul(m, log(add(m, eps))), axis=1))
        total = term if total is None else add(total, term)
    return div(total, float(len(masks)))


def reconstruction_loss(x: np.ndarray, x_hat, s: np.ndarray) -> Tensor:
    """Masked, per-column-std-normalized squared error.

    L = (1/B) sum_ij (S_ij * (Xhat_ij - X_ij) / sigma_j)^2 where sigma_j is
    the population std of column j of X over the batch (1.0 when below
    1e-8).  Only masked entries (S = 1) contribute.
    """
    x = check_matrix(x, "reconstruction target")
    s = check_matrix(s, "reconstruction mask")
    xh = x_hat if isinstance(x_hat, Tensor) else Tensor(check_matrix(x_hat))
    if x.shape != xh.data.shape or x.shape != s.shape:
        raise ValueError(
            f"reconstruction_loss shape mismatch: {x.shape}, {xh.data.shape}, {s.shape}"
        )
    if not np.all((s == 0.0) | (s == 1.0)):
        raise ValueError("reconstruction_loss: mask must be binary")
    sigma = x.std(axis=0, keepdims=True)
    sigma = np.where(sigma < 1e-8, 1.0, sigma)
    scaled = div(mul(sub(xh, Tensor(x)), Tensor(s)), Tensor(sigma))
    return div(tsum(mul(scaled, scaled)), float(x.shape[0]))


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch (stable log-softmax inside)."""
    return cross_entropy_logits(logits, labels)


class Adam:
    """Standard Adam with bias correction over a fixed parameter list."""

    def __init__(self, params: list[Parameter], lr: float = 0.02,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[p.name] = b1 * self.m[p.name] + (1.0 - b1) * g
            v = self.v[p.name] = b2 * self.v[p.name] + (1.0 - b2) * (g * g)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def adam_step(optimizer: Adam):
    """Apply one optimizer update (functional form of :meth:`Adam.step`)."""
    optimizer.step()


def grad_check(f, x: np.ndarray, eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a leaf Tensor to a scalar Tensor.  The relative error
    denominator is max(|analytic|, |numeric|, 1e-8) per entry.
    """
    x = np.asarray(x, dtype=np.float64)
    leaf = Tensor(x.copy())
    out = f(leaf)
    if out.data.shape != ():
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.isfinite(out.data):
        raise ValueError("grad_check: non-finite function value")
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        hi = f(Tensor((flat + bump).reshape(x.shape))).data
        lo = f(Tensor((flat - bump).reshape(x.shape))).data
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError("grad_check: non-finite function value")
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# checkpoint format ---------------------------------------------------------
# Flat binary, one record per named matrix:
#   u16 BE id length, id bytes (utf-8), u32 BE rows, u32 BE cols,
#   rows*cols float64 little-endian, row-major.

def save_checkpoint(path, entries: list[tuple[str, np.ndarray]]):
    with open(path, "wb") as fh:
        for name, matrix in entries:
            mat = np.ascontiguousarray(np.atleast_2d(np.asarray(matrix, dtype=np.float64)))
            ident = name.encode("utf-8")
            fh.write(struct.pack(">H", len(ident)))
            fh.write(ident)
            fh.write(struct.pack(">II", mat.shape[0], mat.shape[1]))
            fh.write(mat.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    out: dict[str, np.ndarray] = {}
    pos = 0
    while pos < len(blob):
        if pos + 2 > len(blob):
            raise CheckpointFormatError("truncated checkpoint: id length")
        (id_len,) = struct.unpack_from(">H", blob, pos)
        pos += 2
        if id_len == 0 or pos + id_len > len(blob):
            raise CheckpointFormatError("truncated or corrupt checkpoint: id bytes")
        try:
            name = blob[pos:pos + id_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError("corrupt checkpoint: bad id encoding") from exc
        pos += id_len
        if pos + 8 > len(blob):
            raise CheckpointFormatError("truncated checkpoint: shape header")
        rows, cols = struct.unpack_from(">II", blob, pos)
        pos += 8
        nbytes = rows * cols * 8
        if pos + nbytes > len(blob):
            raise CheckpointFormatError("truncated checkpoint: matrix data")
        data = np.frombuffer(blob[pos:pos + nbytes], dtype="<f8").reshape(rows, cols)
        pos += nbytes
        if name in out:
            raise CheckpointFormatError(f"duplicate checkpoint entry {name!r}")
        out[name] = np.ascontiguousarray(data.astype(np.float64))
    return out
