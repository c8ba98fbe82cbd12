"""Masked multimodal fusion network.

Per-modality MLP encoders emit ``L_m`` tokens of width ``C``.  The tokens of all
modality slots follow a learnable CLS token; slots outside the requested subset
hold all-zero dummy tokens and are masked out of attention both as keys and as
queries.  The CLS output (after a final layernorm) is the representation ``z``;
a linear classifier gives logits and a two-layer projection head gives ``ẑ``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import binio
from . import subsets as sub
from .numerics import ParameterStore, Tape, Tensor

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    dims: tuple[int, ...]
    n_classes: int
    tokens: tuple[int, ...] | None = None
    encoder_hidden: int = 32
    width: int = 32
    layers: int = 2
    heads: int = 2
    latent: int = 16
    temperature: float = 0.1
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        tokens = self.tokens if self.tokens is not None else (1,) * len(self.dims)
        object.__setattr__(self, "tokens", tuple(int(t) for t in tokens))
        if len(self.tokens) != len(self.dims):
            raise ValueError("need one token length per modality")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if self.layers < 1:
            raise ValueError("need at least one transformer layer")
        if self.latent < 2:
            raise ValueError("latent dimension must be >= 2")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def n_modalities(self) -> int:
        return len(self.dims)

    @property
    def seq_len(self) -> int:
        return 1 + sum(self.tokens)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["tokens"] = list(self.tokens)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["dims"] = tuple(d["dims"])
        if d.get("tokens") is not None:
            d["tokens"] = tuple(d["tokens"])
        return cls(**d)


@dataclass
class FusionOutput:
    z: np.ndarray
    logits: np.ndarray
    zhat: np.ndarray


def init_params(cfg: ModelConfig) -> ParameterStore:
    rng = np.random.default_rng(cfg.init_seed)
    store = ParameterStore()

    def dense(name, n_in, n_out):
        store.add(f"{name}.w", rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / (n_in + n_out)))
        store.add(f"{name}.b", np.zeros(n_out))

    c = cfg.width
    for m, (dim, length) in enumerate(zip(cfg.dims, cfg.tokens)):
        dense(f"enc{m}.fc1", dim, cfg.encoder_hidden)
        dense(f"enc{m}.fc2", cfg.encoder_hidden, length * c)
    store.add("cls", rng.standard_normal(c) * 0.02)
    for t in range(cfg.layers):
        p = f"block{t}"
        for ln in ("ln1", "ln2"):
            store.add(f"{p}.{ln}.g", np.ones(c))
            store.add(f"{p}.{ln}.b", np.zeros(c))
        for proj in ("q", "k", "v", "o"):
            dense(f"{p}.attn.{proj}", c, c)
        dense(f"{p}.mlp.fc1", c, 2 * c)
        dense(f"{p}.mlp.fc2", 2 * c, c)
    store.add("lnf.g", np.ones(c))
    store.add("lnf.b", np.zeros(c))
    dense("head", c, cfg.n_classes)
    dense("proj.fc1", c, c)
    dense("proj.fc2", c, cfg.latent)
    return store


def encode(cfg: ModelConfig, payloads, subset: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Encoder inputs and token mask for one sample under ``subset``.

    Returns per-modality inputs with slots outside ``subset`` zeroed, and the
    boolean attention mask over [CLS] + all modality token slots.
    """
    if subset <= 0:
        raise ValueError("subset must be nonempty")
    inputs, mask = [], [True]
    for m, length in enumerate(cfg.tokens):
        present = bool(subset >> m & 1)
        if present and payloads[m] is None:
            raise ValueError(f"modality {m} requested but no payload is available")
        x = np.asarray(payloads[m], dtype=np.float64) if present else np.zeros(cfg.dims[m])
        inputs.append(x)
        mask.extend([present] * length)
    return inputs, np.array(mask, dtype=bool)


class FusionModel:
    def __init__(self, cfg: ModelConfig, params: ParameterStore | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)

    # -- graph ------------------------------------------------------------
    def _dense(self, tape: Tape, x: Tensor, name: str) -> Tensor:
        return tape.add(tape.matmul(x, tape.param(f"{name}.w")), tape.param(f"{name}.b"))

    def _layernorm(self, tape: Tape, x: Tensor, name: str) -> Tensor:
        y = tape.layernorm_rows(x)
        return tape.add(tape.mul(y, tape.param(f"{name}.g")), tape.param(f"{name}.b"))

    def graph(self, tape: Tape, payloads, mask: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """Batched forward on ``tape``.

        ``payloads[m]`` is (N, dim_m); ``mask`` is (N, M) bool.  Rows of absent
        modalities are replaced by zeros before entering the graph.
        """
        cfg = self.cfg
        mask = np.asarray(mask, dtype=bool)
        n = mask.shape[0]
        if not mask.any(axis=1).all():
            raise ValueError("every row needs a nonempty subset")
        c, heads = cfg.width, cfg.heads
        dh = c // heads

        tokens = [tape.reshape(tape.tile(tape.param("cls"), n), (n, 1, c))]
        token_mask = [np.ones((n, 1), dtype=bool)]
        for m, length in enumerate(cfg.tokens):
            present = mask[:, m]
            x = np.where(present[:, None], np.asarray(payloads[m], dtype=np.float64), 0.0)
            h = tape.relu(self._dense(tape, tape.constant(x), f"enc{m}.fc1"))
            h = self._dense(tape, h, f"enc{m}.fc2")
            h = tape.reshape(h, (n, length, c))
            keep = np.broadcast_to(present[:, None, None], (n, length, c)).astype(np.float64)
            tokens.append(tape.mul(h, tape.constant(keep)))  # dummy slots -> 0
            token_mask.append(np.repeat(present[:, None], length, axis=1))
        x = tape.concat(tokens, axis=1)
        keys = np.concatenate(token_mask, axis=1)  # (N, L)
        seq = keys.shape[1]
        attn_mask = np.broadcast_to(keys[:, None, None, :], (n, heads, seq, seq))
        row_keep = tape.constant(
            np.broadcast_to(keys[:, :, None], (n, seq, c)).astype(np.float64)
        )

        for t in range(cfg.layers):
            p = f"block{t}"
            y = self._layernorm(tape, x, f"{p}.ln1")

            def split_heads(u):
                return tape.transpose(tape.reshape(u, (n, seq, heads, dh)), (0, 2, 1, 3))

            q = split_heads(self._dense(tape, y, f"{p}.attn.q"))
            k = split_heads(self._dense(tape, y, f"{p}.attn.k"))
            v = split_heads(self._dense(tape, y, f"{p}.attn.v"))
            scores = tape.scale(tape.matmul(q, tape.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
            att = tape.masked_softmax_rows(scores, attn_mask)
            o = tape.reshape(tape.transpose(tape.matmul(att, v), (0, 2, 1, 3)), (n, seq, c))
            o = tape.mul(self._dense(tape, o, f"{p}.attn.o"), row_keep)
            x = tape.add(x, o)
            y = self._layernorm(tape, x, f"{p}.ln2")
            y = self._dense(tape, tape.relu(self._dense(tape, y, f"{p}.mlp.fc1")), f"{p}.mlp.fc2")
            x = tape.mul(tape.add(x, y), row_keep)

        cls_out = tape.reshape(tape.slice(x, 1, 0, 1), (n, c))
        z = self._layernorm(tape, cls_out, "lnf")
        logits = self._dense(tape, z, "head")
        zhat = self._dense(tape, tape.relu(self._dense(tape, z, "proj.fc1")), "proj.fc2")
        return z, logits, zhat

    # -- numpy conveniences ------------------------------------------------
    def forward_batch(self, payloads, mask) -> FusionOutput:
        z, logits, zhat = self.graph(Tape(self.params), payloads, mask)
        return FusionOutput(z.data, logits.data, zhat.data)

    def forward(self, payloads, subset: int) -> FusionOutput:
        """Forward one sample; ``payloads[m]`` may be None for modalities not in ``subset``."""
        inputs, _ = encode(self.cfg, payloads, subset)
        mask = sub.to_bool(subset, self.cfg.n_modalities)[None, :]
        out = self.forward_batch([x[None, :] for x in inputs], mask)
        return FusionOutput(out.z[0], out.logits[0], out.zhat[0])

    def forward_subsets(self, payloads, subset_list) -> FusionOutput:
        """Forward one sample under several subsets at once (one row per subset)."""
        rows = len(subset_list)
        m_count = self.cfg.n_modalities
        mask = np.array([sub.to_bool(s, m_count) for s in subset_list])
        batch = []
        for m in range(m_count):
            x = payloads[m] if payloads[m] is not None else np.zeros(self.cfg.dims[m])
            if mask[:, m].any() and payloads[m] is None:
                raise ValueError(f"modality {m} requested but no payload is available")
            batch.append(np.broadcast_to(np.asarray(x, dtype=np.float64), (rows, self.cfg.dims[m])))
        return self.forward_batch(batch, mask)


def predict(logits: np.ndarray) -> int:
    """1-based argmax; ties go to the lowest class index."""
    return int(np.argmax(logits)) + 1


def predict_batch(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=1) + 1


# -- checkpoints -------------------------------------------------------------

def _pack_params(store: ParameterStore) -> bytes:
    chunks = []
    for name in store.names():
        value = store.params[name]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.astype("<f8").tobytes())
    return b"".join(chunks)


def save_params(path, header: dict, store: ParameterStore) -> None:
    header = dict(header, count=len(store.params))
    binio.write_atomic(path, header, _pack_params(store))


def load_params(path) -> tuple[dict, ParameterStore]:
    header, rest = binio.split(Path(path).read_bytes())
    count = header.get("count")
    if not isinstance(count, int) or count < 0:
        raise binio.MalformedHeaderError("header lacks a parameter count")
    reader = binio.Reader(rest)
    store = ParameterStore()
    for _ in range(count):
        (length,) = reader.unpack("<I")
        name = reader.take(length).decode("utf-8")
        (rank,) = reader.unpack("<I")
        shape = reader.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        store.add(name, reader.floats(size).reshape(shape))
    if reader.remaining != 4:
        if reader.remaining < 4:
            raise binio.TruncatedPayloadError("checkpoint ends before its checksum")
        raise binio.MalformedHeaderError("checkpoint has bytes beyond the declared parameters")
    binio.verify(rest[: reader.pos], rest[reader.pos:])
    return header, store


def save_checkpoint(model: FusionModel, path) -> None:
    save_params(path, {"version": CHECKPOINT_VERSION, "config": model.cfg.to_dict()}, model.params)


def load_checkpoint(path) -> FusionModel:
    header, store = load_params(path)
    if header.get("version") != CHECKPOINT_VERSION or "config" not in header:
        raise binio.MalformedHeaderError("not a model checkpoint")
    cfg = ModelConfig.from_dict(header["config"])
    expected = init_params(cfg)
    if expected.names() != store.names() or any(
        expected[k].shape != store[k].shape for k in store.names()
    ):
        raise binio.MalformedHeaderError("checkpoint parameters do not match its config")
    return FusionModel(cfg, store)


def fingerprint(model: FusionModel) -> str:
    h = hashlib.sha256()
    h.update(repr(sorted(model.cfg.to_dict().items())).encode())
    h.update(_pack_params(model.params))
    return h.hexdigest()[:16]
