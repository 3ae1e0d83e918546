"""Party orchestration: message types, transports, epoch drivers.

The host (party 1) federates training in lockstep mini-batches over
ordered, reliable channels to guests (parties 2..K+1).  Guests are
message-driven state machines, so the same runtime serves both the
single-threaded in-process simulator and the socket transport.

Wire layout (socket transport only; the in-process channel passes 64-bit
values directly):

    magic "TVFL" | version u8 | tag u8 | party u16 BE | batch_idx u32 BE
    | payload length u32 BE | payload

Matrix payloads are ``rows u32 BE, cols u32 BE`` followed by row-major
32-bit IEEE-754 little-endian reals; loss payloads are one 64-bit LE
real; control payloads are ``kind u8, phase u8, epoch u32 BE``.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, mul, tsum
from .errors import ProtocolError, TransportTimeout, WireFormatError
from .nn_core import Adam, cross_entropy, reconstruction_loss
from .tabnet import (
    GuestBottom,
    ModelParts,
    MonolithicTabNet,
    PartialEncoder,
    concat_intermediate,
    le_aggregate,
)

HOST_ID = 1


# --------------------------------------------------------------------------
# messages

@dataclass(eq=False)
class IntermediateResult:
    guest: int
    batch_idx: int
    values: np.ndarray


@dataclass(eq=False)
class BinaryMask:
    guest: int
    batch_idx: int
    values: np.ndarray


@dataclass(eq=False)
class DecoderPartition:
    guest: int
    batch_idx: int
    values: np.ndarray


@dataclass(eq=False)
class ReconLoss:
    guest: int
    batch_idx: int
    value: float


@dataclass(eq=False)
class GradPartition:
    guest: int
    batch_idx: int
    values: np.ndarray


@dataclass(eq=False)
class GradIntermediate:
    guest: int
    batch_idx: int
    values: np.ndarray


@dataclass(eq=False)
class Control:
    party: int
    batch_idx: int
    kind: str  # epoch_begin | epoch_end | batch | shutdown
    phase: str = "none"  # none | pretrain | finetune
    epoch: int = 0


Message = (IntermediateResult | BinaryMask | DecoderPartition | ReconLoss
           | GradPartition | GradIntermediate | Control)

_MAGIC = b"TVFL"
_VERSION = 1
_HEADER = struct.Struct(">4sBBHII")

_TAGS = {
    IntermediateResult: 1,
    BinaryMask: 2,
    DecoderPartition: 3,
    ReconLoss: 4,
    GradPartition: 5,
    GradIntermediate: 6,
    Control: 7,
}
_TYPE_BY_TAG = {tag: cls for cls, tag in _TAGS.items()}

_CONTROL_KINDS = {"epoch_begin": 1, "epoch_end": 2, "batch": 3, "shutdown": 4}
_KIND_BY_CODE = {v: k for k, v in _CONTROL_KINDS.items()}
_PHASES = {"none": 0, "pretrain": 1, "finetune": 2}
_PHASE_BY_CODE = {v: k for k, v in _PHASES.items()}


def _encode_matrix(values: np.ndarray) -> bytes:
    mat = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
    if mat.ndim != 2:
        raise WireFormatError(f"matrix payload must be 2-D, got shape {mat.shape}")
    return (struct.pack(">II", mat.shape[0], mat.shape[1])
            + mat.astype("<f4").tobytes())


def _decode_matrix(payload: bytes) -> np.ndarray:
    if len(payload) < 8:
        raise WireFormatError("matrix payload shorter than its shape header")
    rows, cols = struct.unpack_from(">II", payload, 0)
    expected = 8 + rows * cols * 4
    if len(payload) != expected:
        raise WireFormatError(
            f"matrix payload length {len(payload)} != expected {expected}")
    data = np.frombuffer(payload, dtype="<f4", offset=8)
    return np.ascontiguousarray(data.astype(np.float64).reshape(rows, cols))


def encode_message(msg: Message) -> bytes:
    tag = _TAGS.get(type(msg))
    if tag is None:
        raise WireFormatError(f"unknown message type {type(msg).__name__}")
    if isinstance(msg, Control):
        party, batch_idx = msg.party, msg.batch_idx
        payload = struct.pack(">BBI", _CONTROL_KINDS[msg.kind],
                              _PHASES[msg.phase], msg.epoch)
    elif isinstance(msg, ReconLoss):
        party, batch_idx = msg.guest, msg.batch_idx
        payload = struct.pack("<d", msg.value)
    else:
        party, batch_idx = msg.guest, msg.batch_idx
        payload = _encode_matrix(msg.values)
    return _HEADER.pack(_MAGIC, _VERSION, tag, party, batch_idx,
                        len(payload)) + payload


def decode_message(data: bytes) -> Message:
    if len(data) < _HEADER.size:
        raise WireFormatError("truncated header")
    magic, version, tag, party, batch_idx, length = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise WireFormatError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise WireFormatError(f"unsupported version {version}")
    cls = _TYPE_BY_TAG.get(tag)
    if cls is None:
        raise WireFormatError(f"unknown tag {tag}")
    payload = data[_HEADER.size:]
    if len(payload) != length:
        raise WireFormatError(
            f"payload length {len(payload)} != declared {length}")
    if cls is Control:
        if length != 6:
            raise WireFormatError("control payload must be 6 bytes")
        kind_code, phase_code, epoch = struct.unpack(">BBI", payload)
        if kind_code not in _KIND_BY_CODE or phase_code not in _PHASE_BY_CODE:
            raise WireFormatError("unknown control kind or phase")
        return Control(party, batch_idx, _KIND_BY_CODE[kind_code],
                       _PHASE_BY_CODE[phase_code], epoch)
    if cls is ReconLoss:
        if length != 8:
            raise WireFormatError("loss payload must be 8 bytes")
        (value,) = struct.unpack("<d", payload)
        return ReconLoss(party, batch_idx, value)
    return cls(party, batch_idx, _decode_matrix(payload))


def encoded_size(msg: Message) -> int:
    """Wire size of a message without serializing it."""
    if isinstance(msg, Control):
        payload = 6
    elif isinstance(msg, ReconLoss):
        payload = 8
    else:
        payload = 8 + 4 * msg.values.shape[0] * msg.values.shape[1]
    return _HEADER.size + payload


# --------------------------------------------------------------------------
# transports

class InProcessEndpoint:
    """One side of a queue-backed channel passing messages at 64-bit."""

    def __init__(self, inbox: queue.SimpleQueue, outbox: queue.SimpleQueue):
        self._inbox = inbox
        self._outbox = outbox
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, msg: Message):
        self.bytes_sent += encoded_size(msg)
        self._outbox.put(msg)

    def recv(self, timeout: float | None = None) -> Message:
        try:
            msg = self._inbox.get(timeout=timeout) if timeout is not None \
                else self._inbox.get()
        except queue.Empty:
            raise TransportTimeout(-1, "in-process receive timed out")
        self.bytes_received += encoded_size(msg)
        return msg

    def try_recv(self) -> Message | None:
        try:
            msg = self._inbox.get_nowait()
        except queue.Empty:
            return None
        self.bytes_received += encoded_size(msg)
        return msg

    def close(self):
        pass


class SocketEndpoint:
    """Length-delimited frames over TCP, one encoded message per frame."""

    def __init__(self, sock: socket.socket, timeout: float | None = None):
        self._sock = sock
        self._timeout = timeout
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, msg: Message):
        data = encode_message(msg)
        frame = struct.pack(">I", len(data)) + data
        self._sock.sendall(frame)
        self.bytes_sent += len(frame)

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            chunk = self._sock.recv(remaining)
            if not chunk:
                raise WireFormatError("connection closed mid-frame")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def recv(self, timeout: float | None = None) -> Message:
        self._sock.settimeout(timeout if timeout is not None else self._timeout)
        try:
            header = self._read_exact(4)
            (length,) = struct.unpack(">I", header)
            data = self._read_exact(length)
        except socket.timeout:
            raise TransportTimeout(-1, "socket receive timed out")
        self.bytes_received += 4 + length
        return decode_message(data)

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


def transport_pair(kind: str, timeout: float | None = 5.0):
    """Connected (host endpoint, guest endpoint) of the requested kind."""
    if kind == "in_process":
        to_guest: queue.SimpleQueue = queue.SimpleQueue()
        to_host: queue.SimpleQueue = queue.SimpleQueue()
        host = InProcessEndpoint(inbox=to_host, outbox=to_guest)
        guest = InProcessEndpoint(inbox=to_guest, outbox=to_host)
        return host, guest
    if kind == "socket":
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        client = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        client.connect(listener.getsockname())
        server_side, _ = listener.accept()
        listener.close()
        server_side.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        client.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return SocketEndpoint(server_side, timeout), SocketEndpoint(client, None)
    raise ValueError(f"unknown transport kind {kind!r}")


# --------------------------------------------------------------------------
# failure model and cache

def sample_failures(n_guests: int, p_fail: float, epoch: int,
                    rng: np.random.Generator) -> frozenset[int]:
    """Guest ids offline for the epoch; epoch 0 is guaranteed all-online."""
    if not 0.0 <= p_fail <= 1.0:
        raise ValueError("p_fail must lie in [0, 1]")
    if epoch == 0:
        return frozenset()
    draws = rng.random(n_guests)
    return frozenset(i + 2 for i in range(n_guests) if draws[i] < p_fail)


@dataclass
class FailureSchedule:
    """Per-epoch offline sets derived statelessly from (seed, epoch)."""

    p_fail: float
    n_guests: int
    seed: int

    def offline_for(self, epoch: int) -> frozenset[int]:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, epoch]))
        return sample_failures(self.n_guests, self.p_fail, epoch, rng)

    @staticmethod
    def never(n_guests: int) -> "FailureSchedule":
        return FailureSchedule(0.0, n_guests, 0)


@dataclass
class CacheEntry:
    activations: list[np.ndarray]
    mask: np.ndarray | None = None


class CacheStore:
    """Host cache of the latest (guest, batch) intermediates (+ masks)."""

    def __init__(self):
        self._entries: dict[tuple[int, int], CacheEntry] = {}

    def put(self, guest: int, batch_idx: int, activations: list[np.ndarray],
            mask: np.ndarray | None = None):
        self._entries[(guest, batch_idx)] = CacheEntry(
            [a.copy() for a in activations],
            mask.copy() if mask is not None else None)

    def get(self, guest: int, batch_idx: int) -> CacheEntry:
        entry = self._entries.get((guest, batch_idx))
        if entry is None:
            raise ProtocolError(
                f"cache miss for guest {guest}, batch {batch_idx}: the "
                "epoch-0 all-online guarantee was violated")
        return entry

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)


def resolve_inputs(guest: int, batch_idx: int,
                   live: CacheEntry | None, strategy: str, cache: CacheStore,
                   zero_shapes: tuple[list[tuple[int, int]], tuple[int, int] | None],
                   ) -> CacheEntry:
    """Pick the inputs for one guest: live message, cache, or zeros."""
    if live is not None:
        cache.put(guest, batch_idx, live.activations, live.mask)
        return live
    if strategy == "cache":
        return cache.get(guest, batch_idx)
    if strategy == "zeros":
        act_shapes, mask_shape = zero_shapes
        return CacheEntry([np.zeros(s) for s in act_shapes],
                          np.zeros(mask_shape) if mask_shape is not None else None)
    if strategy == "none":
        raise ProtocolError(
            f"guest {guest} offline with strategy 'none': no failure handling")
    raise ValueError(f"unknown strategy {strategy!r}")


# --------------------------------------------------------------------------
# guest runtime

class GuestRuntime:
    """Message-driven state machine for one guest party.

    ``design`` selects the wiring:
      * ``tabvfl``: BN+FC extractor feeding the host encoder, plus the
        reconstruction head driven by decoder partitions.
      * ``le``: extractor plus a full local encoder; decision-step outputs
        are shipped to the host in step order.
      * ``lt``: a fully local model (pretraining happens in place); during
        finetuning only local latents are sent and weights stay frozen.
    """

    def __init__(self, guest_id: int, design: str, features: np.ndarray,
                 batches: list[tuple[int, int]], config,
                 bottom: GuestBottom | None = None,
                 local_encoder: PartialEncoder | None = None,
                 local_model: MonolithicTabNet | None = None,
                 n_guests: int = 1):
        self.guest_id = guest_id
        self.design = design
        self.features = features
        self.batches = batches
        self.config = config
        self.bottom = bottom
        self.local_encoder = local_encoder
        self.local_model = local_model
        self.n_guests = n_guests
        params = []
        if design == "tabvfl":
            params = bottom.parameters()
        elif design == "le":
            params = bottom.parameters() + local_encoder.parameters()
        self.optimizer = Adam(params, lr=config.learning_rate) if params else None
        self._expected_batch = 0
        self._pending: dict = {}
        self._step_grads: list[np.ndarray] = []
        self.shutdown_requested = False

    # -- helpers ---------------------------------------------------------
    def _batch_rows(self, batch_idx: int) -> np.ndarray:
        if batch_idx >= len(self.batches):
            raise ProtocolError(
                f"guest {self.guest_id}: batch index {batch_idx} out of range")
        lo, hi = self.batches[batch_idx]
        return self.features[lo:hi]

    def _check_order(self, batch_idx: int):
        if batch_idx != self._expected_batch:
            raise ProtocolError(
                f"guest {self.guest_id}: out-of-order batch {batch_idx}, "
                f"expected {self._expected_batch}")
        self._expected_batch += 1

    def _set_training(self, flag: bool):
        for m in (self.bottom, self.local_encoder):
            if m is not None:
                m.set_training(flag)

    # -- dispatch --------------------------------------------------------
    def handle(self, msg) -> list:
        if isinstance(msg, Control):
            return self._handle_control(msg)
        if isinstance(msg, DecoderPartition):
            return self._handle_partition(msg)
        if isinstance(msg, GradIntermediate):
            return self._handle_grad(msg)
        raise ProtocolError(
            f"guest {self.guest_id}: unexpected message {type(msg).__name__}")

    def _handle_control(self, msg: Control) -> list:
        if msg.kind == "epoch_begin":
            self._expected_batch = 0
            self._pending.clear()
            self._step_grads.clear()
            return []
        if msg.kind == "epoch_end":
            return []
        if msg.kind == "shutdown":
            self.shutdown_requested = True
            return []
        if msg.kind == "batch":
            self._check_order(msg.batch_idx)
            if msg.phase == "pretrain":
                return self._pretrain_batch(msg.batch_idx)
            if msg.phase == "finetune":
                return self._finetune_batch(msg.batch_idx)
            raise ProtocolError(f"batch announce without phase: {msg}")
        raise ProtocolError(f"unknown control kind {msg.kind!r}")

    # -- pretraining -----------------------------------------------------
    def _pretrain_batch(self, batch_idx: int) -> list:
        x = self._batch_rows(batch_idx)
        if self.design == "lt":
            # fully local autoencoding step; only the loss is reported
            loss = self.local_model.pretrain_step(x)
            return [ReconLoss(self.guest_id, batch_idx, loss)]
        self._set_training(True)
        if self.optimizer:
            self.optimizer.zero_grad()
        mask = self.bottom.obfuscator.sample(x.shape)
        masked = x * (1.0 - mask)
        if self.design == "tabvfl":
            hidden = self.bottom.pretrain_forward(Tensor(masked))
            self._pending = {"batch": batch_idx, "x": x, "mask": mask,
                             "hidden": hidden}
            return [BinaryMask(self.guest_id, batch_idx, mask),
                    IntermediateResult(self.guest_id, batch_idx, hidden.data)]
        if self.design == "le":
            hidden = self.bottom.pretrain_forward(Tensor(masked))
            enc = self.local_encoder(hidden, prior0=1.0 - mask)
            self._pending = {"batch": batch_idx, "x": x, "mask": mask,
                             "steps": enc.step_outputs}
            return [IntermediateResult(self.guest_id, batch_idx, d.data)
                    for d in enc.step_outputs]
        raise ProtocolError(f"unknown design {self.design!r}")

    def _handle_partition(self, msg: DecoderPartition) -> list:
        if self._pending.get("batch") != msg.batch_idx:
            raise ProtocolError(
                f"guest {self.guest_id}: decoder partition for unexpected "
                f"batch {msg.batch_idx}")
        chunk = Tensor(msg.values)
        recon = self.bottom.reconstruct(chunk)
        loss = reconstruction_loss(self._pending["x"], recon,
                                   self._pending["mask"])
        loss.backward()
        return [ReconLoss(self.guest_id, msg.batch_idx, float(loss.data)),
                GradPartition(self.guest_id, msg.batch_idx, chunk.grad)]

    # -- finetuning ------------------------------------------------------
    def _finetune_batch(self, batch_idx: int) -> list:
        x = self._batch_rows(batch_idx)
        if self.design == "lt":
            # frozen local model: inference latents only, nothing trains
            z = self.local_model.latents(x)
            return [IntermediateResult(self.guest_id, batch_idx, z)]
        self._set_training(True)
        if self.optimizer:
            self.optimizer.zero_grad()
        hidden = self.bottom.finetune_forward(Tensor(x))
        if self.design == "tabvfl":
            self._pending = {"batch": batch_idx, "hidden": hidden}
            return [IntermediateResult(self.guest_id, batch_idx, hidden.data)]
        if self.design == "le":
            enc = self.local_encoder(hidden)
            self._pending = {"batch": batch_idx, "latents": enc.latents,
                             "mask_loss": enc.mask_loss}
            return [IntermediateResult(self.guest_id, batch_idx,
                                       enc.latents.data),
                    ReconLoss(self.guest_id, batch_idx,
                              float(enc.mask_loss.data))]
        raise ProtocolError(f"unknown design {self.design!r}")

    def _handle_grad(self, msg: GradIntermediate) -> list:
        if self._pending.get("batch") != msg.batch_idx:
            raise ProtocolError(
                f"guest {self.guest_id}: gradient for unexpected batch "
                f"{msg.batch_idx}")
        if self.design == "tabvfl":
            self._pending["hidden"].backward(seed=msg.values)
            self.optimizer.step()
            self._pending = {}
            return []
        if self.design == "le":
            if "steps" in self._pending:  # pretraining: one grad per step
                self._step_grads.append(msg.values)
                if len(self._step_grads) < len(self._pending["steps"]):
                    return []
                total = None
                for d, g in zip(self._pending["steps"], self._step_grads):
                    term = tsum(mul(d, Tensor(g)))
                    total = term if total is None else add(total, term)
                total.backward()
                self._step_grads = []
            else:  # finetuning: latent grad plus the local sparsity term
                seeded = tsum(mul(self._pending["latents"], Tensor(msg.values)))
                lam = self.config.lambda_sparse / self.n_guests
                combined = add(seeded, mul(self._pending["mask_loss"], -lam))
                combined.backward()
            self.optimizer.step()
            self._pending = {}
            return []
        raise ProtocolError(f"design {self.design!r} expects no gradients")


# --------------------------------------------------------------------------
# host federation

class GuestLink:
    """Host-side handle to one guest: endpoint plus optional local pump."""

    def __init__(self, guest_id: int, endpoint, pump=None,
                 timeout: float | None = 5.0):
        self.guest_id = guest_id
        self.endpoint = endpoint
        self.pump = pump
        self.timeout = timeout

    def send(self, msg):
        self.endpoint.send(msg)

    def recv(self, expect_type, batch_idx: int | None = None):
        if self.pump is not None:
            self.pump()
        try:
            msg = self.endpoint.recv(timeout=self.timeout)
        except TransportTimeout:
            raise TransportTimeout(self.guest_id)
        if not isinstance(msg, expect_type):
            raise ProtocolError(
                f"expected {expect_type.__name__} from guest {self.guest_id}, "
                f"got {type(msg).__name__}")
        if msg.guest != self.guest_id:
            raise ProtocolError(
                f"message from guest {msg.guest} arrived on link {self.guest_id}")
        if batch_idx is not None and msg.batch_idx != batch_idx:
            raise ProtocolError(
                f"guest {self.guest_id}: out-of-order batch {msg.batch_idx}, "
                f"expected {batch_idx}")
        return msg

    @property
    def bytes_sent(self):
        return self.endpoint.bytes_sent

    @property
    def bytes_received(self):
        return self.endpoint.bytes_received


def make_inprocess_link(runtime: GuestRuntime) -> GuestLink:
    """Wire a guest runtime to the host on one thread of control."""
    host_end, guest_end = transport_pair("in_process")

    def pump():
        while True:
            msg = guest_end.try_recv()
            if msg is None:
                return
            for reply in runtime.handle(msg):
                guest_end.send(reply)

    return GuestLink(runtime.guest_id, host_end, pump=pump)


def serve_guest(endpoint, runtime: GuestRuntime):
    """Blocking guest loop for threaded/socket transports."""
    while not runtime.shutdown_requested:
        msg = endpoint.recv(timeout=None)
        for reply in runtime.handle(msg):
            endpoint.send(reply)
    endpoint.close()


def make_socket_link(runtime: GuestRuntime, timeout: float | None = 5.0) -> GuestLink:
    host_end, guest_end = transport_pair("socket", timeout=timeout)
    thread = threading.Thread(target=serve_guest, args=(guest_end, runtime),
                              daemon=True)
    thread.start()
    return GuestLink(runtime.guest_id, host_end, pump=None, timeout=timeout)


@dataclass
class EpochSummary:
    epoch: int
    phase: str
    offline: frozenset[int]
    batch_losses: list[float] = field(default_factory=list)
    contributors: list[list[int]] = field(default_factory=list)
    accuracy: float | None = None

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.batch_losses)) if self.batch_losses else float("nan")


class Federation:
    """Host-side driver running the two training phases in lockstep.

    Covers the distributed designs (``tabvfl``, ``le``, ``lt``); the
    central baseline never constructs one.
    """

    def __init__(self, design: str, parts: ModelParts, links: list[GuestLink],
                 labels: np.ndarray, batches: list[tuple[int, int]],
                 strategy: str = "none",
                 schedule: FailureSchedule | None = None,
                 guest_runtimes: list[GuestRuntime] | None = None,
                 lt_latent_slices: list[tuple[int, int]] | None = None):
        if strategy not in ("none", "cache", "zeros"):
            raise ValueError(f"unknown strategy {strategy!r}")
        self.design = design
        self.parts = parts
        self.links = {link.guest_id: link for link in links}
        self.guest_ids = sorted(self.links)
        self.labels = labels
        self.batches = batches
        self.strategy = strategy
        self.schedule = schedule or FailureSchedule.never(len(links))
        self.cache = CacheStore()
        self.config = parts.config
        self.guest_runtimes = guest_runtimes or []
        # per-guest latent slice for LT (guests ship partitioned latents)
        self.lt_latent_slices = lt_latent_slices or parts.chunk_slices
        host_modules = [parts.encoder, parts.decoder, parts.final]
        params, seen = [], set()
        for m in host_modules:
            for p in m.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    params.append(p)
        if design == "lt":
            params = parts.final.parameters()
        elif design == "le":
            params = parts.decoder.parameters() + parts.final.parameters()
        self.host_optimizer = Adam(params, lr=self.config.learning_rate)
        self._host_modules = host_modules

    # -- shared plumbing -------------------------------------------------
    def _broadcast(self, online, kind, phase, epoch, batch_idx=0):
        for g in online:
            self.links[g].send(Control(g, batch_idx, kind, phase, epoch))

    def _zero_host_grads(self):
        for m in self._host_modules:
            m.zero_grad()

    def _set_host_training(self, flag: bool):
        for m in self._host_modules:
            m.set_training(flag)

    def _batch_size(self, batch_idx: int) -> int:
        lo, hi = self.batches[batch_idx]
        return hi - lo

    def _guest_width(self, guest_id: int) -> int:
        a, b = self.parts.feature_slices[guest_id - 2]
        return b - a

    def _collect(self, online: set[int], batch_idx: int, with_masks: bool,
                 n_tensors: int = 1) -> dict[int, CacheEntry]:
        """Receive live results from online guests, in ascending id order."""
        live: dict[int, CacheEntry] = {}
        dropped: set[int] = set()
        for g in sorted(online):
            try:
                mask = None
                if with_masks:
                    mask = self.links[g].recv(BinaryMask, batch_idx).values
                acts = [self.links[g].recv(IntermediateResult, batch_idx).values
                        for _ in range(n_tensors)]
                live[g] = CacheEntry(acts, mask)
            except TransportTimeout:
                dropped.add(g)
        online -= dropped
        return live

    def _zero_shapes(self, guest_id: int, batch_idx: int, phase: str,
                     n_tensors: int):
        b = self._batch_size(batch_idx)
        if self.design == "tabvfl":
            width = self._guest_width(guest_id)
            mask_shape = (b, width) if phase == "pretrain" else None
            return [(b, width)], mask_shape
        if self.design == "le":
            latent = self.config.latent_dim
            shape = (b, latent)
            return [shape] * n_tensors, None
        if self.design == "lt":
            a, z = self.lt_latent_slices[guest_id - 2]
            return [(b, z - a)], None
        raise ValueError(self.design)

    # -- pretraining epoch -------------------------------------------------
    def run_pretrain_epoch(self, epoch: int) -> EpochSummary:
        offline = set(self.schedule.offline_for(epoch))
        online = set(self.guest_ids) - offline
        summary = EpochSummary(epoch, "pretrain", frozenset(offline))
        self._broadcast(online, "epoch_begin", "pretrain", epoch)
        self._set_host_training(True)
        for b in range(len(self.batches)):
            if self.design == "lt":
                self._lt_pretrain_batch(b, online, epoch, summary)
            elif self.design == "le":
                self._le_pretrain_batch(b, online, epoch, summary)
            else:
                self._tabvfl_pretrain_batch(b, online, epoch, summary)
        self._broadcast(online, "epoch_end", "pretrain", epoch)
        summary.offline = frozenset(set(self.guest_ids) - online)
        return summary

    def _tabvfl_pretrain_batch(self, b, online, epoch, summary):
        self._broadcast(online, "batch", "pretrain", epoch, b)
        live = self._collect(online, b, with_masks=True)
        acts, masks = [], []
        for g in self.guest_ids:
            entry = resolve_inputs(
                g, b, live.get(g), self.strategy, self.cache,
                self._zero_shapes(g, b, "pretrain", 1))
            acts.append(entry.activations[0])
            masks.append(entry.mask)
        self._zero_host_grads()
        intermediate = Tensor(concat_intermediate(acts))
        mask_complete = concat_intermediate(masks)
        enc = self.parts.encoder(intermediate, prior0=1.0 - mask_complete)
        out_intermediate = self.parts.decoder(enc.step_outputs)
        for g in sorted(online):
            a, z = self.parts.chunk_slices[g - 2]
            self.links[g].send(DecoderPartition(
                g, b, np.ascontiguousarray(out_intermediate.data[:, a:z])))
        total = 0.0
        contributed = []
        upstream = np.zeros_like(out_intermediate.data)
        for g in sorted(online):
            loss_msg = self.links[g].recv(ReconLoss, b)
            grad_msg = self.links[g].recv(GradPartition, b)
            total += loss_msg.value
            contributed.append(g)
            a, z = self.parts.chunk_slices[g - 2]
            upstream[:, a:z] = grad_msg.values
        out_intermediate.backward(seed=upstream)
        grad_int = intermediate.grad
        for g in sorted(online):
            a, z = self.parts.feature_slices[g - 2]
            self.links[g].send(GradIntermediate(
                g, b, np.ascontiguousarray(grad_int[:, a:z])))
            if self.links[g].pump is not None:
                self.links[g].pump()
        self.host_optimizer.step()
        summary.batch_losses.append(total)
        summary.contributors.append(contributed)

    def _le_pretrain_batch(self, b, online, epoch, summary):
        n_steps = self.config.n_steps
        self._broadcast(online, "batch", "pretrain", epoch, b)
        live = self._collect(online, b, with_masks=False, n_tensors=n_steps)
        per_guest = []
        for g in self.guest_ids:
            entry = resolve_inputs(
                g, b, live.get(g), self.strategy, self.cache,
                self._zero_shapes(g, b, "pretrain", n_steps))
            per_guest.append(entry.activations)
        aggregated = le_aggregate(per_guest)
        leaves = [Tensor(a) for a in aggregated]
        self._zero_host_grads()
        out_intermediate = self.parts.decoder(leaves)
        for g in sorted(online):
            a, z = self.parts.chunk_slices[g - 2]
            self.links[g].send(DecoderPartition(
                g, b, np.ascontiguousarray(out_intermediate.data[:, a:z])))
        total = 0.0
        contributed = []
        upstream = np.zeros_like(out_intermediate.data)
        for g in sorted(online):
            loss_msg = self.links[g].recv(ReconLoss, b)
            grad_msg = self.links[g].recv(GradPartition, b)
            total += loss_msg.value
            contributed.append(g)
            a, z = self.parts.chunk_slices[g - 2]
            upstream[:, a:z] = grad_msg.values
        out_intermediate.backward(seed=upstream)
        for g in sorted(online):
            for leaf in leaves:
                self.links[g].send(GradIntermediate(g, b, leaf.grad))
            if self.links[g].pump is not None:
                self.links[g].pump()
        self.host_optimizer.step()
        summary.batch_losses.append(total)
        summary.contributors.append(contributed)

    def _lt_pretrain_batch(self, b, online, epoch, summary):
        self._broadcast(online, "batch", "pretrain", epoch, b)
        total = 0.0
        contributed = []
        for g in sorted(online):
            try:
                loss_msg = self.links[g].recv(ReconLoss, b)
            except TransportTimeout:
                online.discard(g)
                continue
            total += loss_msg.value
            contributed.append(g)
        summary.batch_losses.append(total)
        summary.contributors.append(contributed)

    # -- finetuning epoch ---------------------------------------------------
    def run_finetune_epoch(self, epoch: int) -> EpochSummary:
        if self.labels is None:
            raise ProtocolError("finetuning requires labels at the host")
        offline = set(self.schedule.offline_for(epoch))
        online = set(self.guest_ids) - offline
        summary = EpochSummary(epoch, "finetune", frozenset(offline))
        self._broadcast(online, "epoch_begin", "finetune", epoch)
        self._set_host_training(True)
        correct = 0
        seen = 0
        for b in range(len(self.batches)):
            lo, hi = self.batches[b]
            y = self.labels[lo:hi]
            if self.design == "lt":
                loss, c = self._lt_finetune_batch(b, online, epoch, y, summary)
            elif self.design == "le":
                loss, c = self._le_finetune_batch(b, online, epoch, y, summary)
            else:
                loss, c = self._tabvfl_finetune_batch(b, online, epoch, y, summary)
            correct += c
            seen += hi - lo
        self._broadcast(online, "epoch_end", "finetune", epoch)
        summary.accuracy = correct / seen if seen else float("nan")
        summary.offline = frozenset(set(self.guest_ids) - online)
        return summary

    def _tabvfl_finetune_batch(self, b, online, epoch, y, summary):
        self._broadcast(online, "batch", "finetune", epoch, b)
        live = self._collect(online, b, with_masks=False)
        acts = []
        for g in self.guest_ids:
            entry = resolve_inputs(
                g, b, live.get(g), self.strategy, self.cache,
                self._zero_shapes(g, b, "finetune", 1))
            acts.append(entry.activations[0])
        self._zero_host_grads()
        intermediate = Tensor(concat_intermediate(acts))
        enc = self.parts.encoder(intermediate)
        logits = self.parts.final(enc.latents)
        loss = cross_entropy(logits, y) - self.config.lambda_sparse * enc.mask_loss
        loss.backward()
        grad_int = intermediate.grad
        for g in sorted(online):
            a, z = self.parts.feature_slices[g - 2]
            self.links[g].send(GradIntermediate(
                g, b, np.ascontiguousarray(grad_int[:, a:z])))
            if self.links[g].pump is not None:
                self.links[g].pump()
        self.host_optimizer.step()
        summary.batch_losses.append(float(loss.data))
        summary.contributors.append(sorted(online))
        return float(loss.data), int((logits.data.argmax(axis=1) == y).sum())

    def _le_finetune_batch(self, b, online, epoch, y, summary):
        self._broadcast(online, "batch", "finetune", epoch, b)
        live: dict[int, CacheEntry] = {}
        mask_losses = []
        dropped = set()
        for g in sorted(online):
            try:
                act = self.links[g].recv(IntermediateResult, b).values
                m_loss = self.links[g].recv(ReconLoss, b).value
            except TransportTimeout:
                dropped.add(g)
                continue
            live[g] = CacheEntry([act])
            mask_losses.append(m_loss)
        online -= dropped
        latents = []
        for g in self.guest_ids:
            entry = resolve_inputs(
                g, b, live.get(g), self.strategy, self.cache,
                ([(self._batch_size(b), self.config.latent_dim)], None))
            latents.append(entry.activations[0])
        self._zero_host_grads()
        z_sum = Tensor(np.sum(latents, axis=0))
        logits = self.parts.final(z_sum)
        ce = cross_entropy(logits, y)
        ce.backward()
        # the sparsity term lives on guest tapes; guests apply
        # -lambda/K * dM/dtheta locally on top of the latent gradient
        reported = float(ce.data)
        if mask_losses:
            reported -= (self.config.lambda_sparse
                         * float(np.sum(mask_losses)) / len(self.guest_ids))
        for g in sorted(online):
            self.links[g].send(GradIntermediate(g, b, z_sum.grad))
            if self.links[g].pump is not None:
                self.links[g].pump()
        self.host_optimizer.step()
        summary.batch_losses.append(reported)
        summary.contributors.append(sorted(online))
        return reported, int((logits.data.argmax(axis=1) == y).sum())

    def _lt_finetune_batch(self, b, online, epoch, y, summary):
        self._broadcast(online, "batch", "finetune", epoch, b)
        live = self._collect(online, b, with_masks=False)
        chunks = []
        for g in self.guest_ids:
            entry = resolve_inputs(
                g, b, live.get(g), self.strategy, self.cache,
                self._zero_shapes(g, b, "finetune", 1))
            chunks.append(entry.activations[0])
        self._zero_host_grads()
        latent = Tensor(concat_intermediate(chunks))
        logits = self.parts.final(latent)
        loss = cross_entropy(logits, y)
        loss.backward()
        self.host_optimizer.step()
        summary.batch_losses.append(float(loss.data))
        summary.contributors.append(sorted(online))
        return float(loss.data), int((logits.data.argmax(axis=1) == y).sum())

    # -- lifecycle ---------------------------------------------------------
    def shutdown(self):
        for g in self.guest_ids:
            self.links[g].send(Control(g, 0, "shutdown"))
            if self.links[g].pump is not None:
                self.links[g].pump()

    @property
    def bytes_sent(self) -> int:
        return sum(link.bytes_sent for link in self.links.values())

    @property
    def bytes_received(self) -> int:
        return sum(link.bytes_received for link in self.links.values())


def wire_federation(design: str, parts: ModelParts,
                    guest_features: list[np.ndarray], labels: np.ndarray,
                    batches: list[tuple[int, int]], strategy: str = "none",
                    schedule: FailureSchedule | None = None,
                    transport: str = "in_process", timeout: float | None = 5.0,
                    local_encoders: list[PartialEncoder] | None = None,
                    local_models: list[MonolithicTabNet] | None = None,
                    lt_latent_slices: list[tuple[int, int]] | None = None,
                    ) -> Federation:
    """Build guest runtimes and connected links for one design instance.

    ``guest_features`` holds each guest's training rows (already reduced to
    its feature columns), aligned with ``batches`` row bounds.
    """
    runtimes = []
    links = []
    n_guests = len(guest_features)
    for i, feats in enumerate(guest_features):
        gid = i + 2
        runtime = GuestRuntime(
            gid, design, feats, batches, parts.config,
            bottom=parts.bottoms[i] if design in ("tabvfl", "le") else None,
            local_encoder=local_encoders[i] if local_encoders else None,
            local_model=local_models[i] if local_models else None,
            n_guests=n_guests)
        runtimes.append(runtime)
        if transport == "in_process":
            links.append(make_inprocess_link(runtime))
        elif transport == "socket":
            links.append(make_socket_link(runtime, timeout=timeout))
        else:
            raise ValueError(f"unknown transport {transport!r}")
    return Federation(design, parts, links, labels, batches,
                      strategy=strategy, schedule=schedule,
                      guest_runtimes=runtimes,
                      lt_latent_slices=lt_latent_slices)


def run_pretrain_epoch(federation: Federation, epoch: int) -> EpochSummary:
    """Drive one pretraining epoch over all mini-batches."""
    return federation.run_pretrain_epoch(epoch)


def run_finetune_epoch(federation: Federation, epoch: int) -> EpochSummary:
    """Drive one finetuning epoch over all mini-batches."""
    return federation.run_finetune_epoch(epoch)
