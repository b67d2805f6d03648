"""The DETNO network: encoders, cross-attention blocks, output head.

Three encoders map sensor tokens, query tokens and the Fourier-embedded
diffusion timestep into a shared latent width.  Each block then runs

* cross-attention of the query stream against the sensor-derived operator
  stream and the single-token diffusion stream, fused by summation and an
  affine projection with a residual,
* a mixture-of-experts feed-forward gated on the raw query coordinates,
* linear self-attention across queries,
* a second expert feed-forward after the self-attention.

Pre-normalization precedes every sublayer.  Sensor tokens are put in a
canonical value-derived order on entry, which makes the forward pass
bit-exactly invariant under sensor permutations.  The single-stream ablation
(``two_stream=False``) instead concatenates the timestep embedding onto each
sensor token before the branch encoder and drops the diffusion stream.

Checkpoints use a little-endian container (magic ``DTCK``) of named float32
tensors with a trailing CRC-32.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import (
    ChecksumError,
    ConfigError,
    ContractError,
    NumericError,
    ShapeMismatchError,
    UnknownTensorError,
)
from .nn import (
    AttentionLayer,
    FourierEmbedConfig,
    LayerNorm,
    MixtureOfExperts,
    Mlp,
    ParameterStore,
    affine,
    fourier_embed,
)

CHECKPOINT_MAGIC = b"DTCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_blocks: int = 3
    n_heads: int = 4
    n_experts: int = 3
    expert_hidden: int = 256
    gating_hidden: int = 256
    fourier: FourierEmbedConfig = field(default_factory=FourierEmbedConfig)
    two_stream: bool = True
    # second expert feed-forward after self-attention; the parameter budget
    # (about 1.2M at defaults) needs it, a single one lands near 0.7M
    moe_after_self: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ConfigError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        for name in ("d", "n_blocks", "n_heads", "n_experts", "expert_hidden",
                     "gating_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class ForwardInput:
    sensors: np.ndarray   # [n_sensors, 4] normalized tokens
    queries: np.ndarray   # [n_queries, 4] coordinates plus state channels
    tau: float            # diffusion timestep


class _Block:
    def __init__(self, store: ParameterStore, name: str, cfg: ModelConfig,
                 rng: np.random.Generator):
        d = cfg.d
        self.norm_cross = LayerNorm(store, f"{name}.norm_cross", d)
        self.attn_op = AttentionLayer(store, f"{name}.cross_op", d, cfg.n_heads, rng)
        if cfg.two_stream:
            self.attn_diff = AttentionLayer(store, f"{name}.cross_diff", d,
                                            cfg.n_heads, rng)
        self.w_fuse = store.create(f"{name}.fuse.w", (d, d), rng)
        self.b_fuse = store.create(f"{name}.fuse.b", (d,), rng, init="zeros")
        self.norm_moe = LayerNorm(store, f"{name}.norm_moe", d)
        self.moe = MixtureOfExperts(store, f"{name}.moe", d, cfg.n_experts,
                                    cfg.expert_hidden, cfg.gating_hidden, rng)
        self.norm_self = LayerNorm(store, f"{name}.norm_self", d)
        self.attn_self = AttentionLayer(store, f"{name}.self", d, cfg.n_heads, rng)
        if cfg.moe_after_self:
            self.norm_moe2 = LayerNorm(store, f"{name}.norm_moe2", d)
            self.moe2 = MixtureOfExperts(store, f"{name}.moe2", d, cfg.n_experts,
                                         cfg.expert_hidden, cfg.gating_hidden, rng)
        self.two_stream = cfg.two_stream
        self.moe_after_self = cfg.moe_after_self

    def __call__(self, q: Tensor, kv_op: Tensor, kv_diff: Tensor | None,
                 raw_queries: Tensor) -> Tensor:
        normed = self.norm_cross(q)
        context = self.attn_op(normed, kv_op)
        if self.two_stream:
            context = context + self.attn_diff(normed, kv_diff)
        q = q + affine(context, self.w_fuse, self.b_fuse)
        q = q + self.moe(self.norm_moe(q), raw_queries)
        normed = self.norm_self(q)
        q = q + self.attn_self(normed, normed)
        if self.moe_after_self:
            q = q + self.moe2(self.norm_moe2(q), raw_queries)
        return q


class DetnoModel:
    """Transformer neural operator predicting diffusion velocities at queries."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        self.store = ParameterStore(dtype=config.np_dtype)
        rng = np.random.default_rng(seed)
        d = config.d
        branch_in = 4 if config.two_stream else 4 + config.fourier.dim
        self.query_encoder = Mlp(self.store, "encoder.query", [4, d, d], rng)
        self.branch_encoder = Mlp(self.store, "encoder.branch", [branch_in, d, d], rng)
        self.branch_norm = LayerNorm(self.store, "encoder.branch_norm", d)
        if config.two_stream:
            self.diffusion_encoder = Mlp(self.store, "encoder.diffusion",
                                         [config.fourier.dim, d, d], rng)
            self.diffusion_norm = LayerNorm(self.store, "encoder.diffusion_norm", d)
        self.blocks = [_Block(self.store, f"block{i}", config, rng)
                       for i in range(config.n_blocks)]
        self.out_norm = LayerNorm(self.store, "output.norm", d)
        self.head = Mlp(self.store, "output.head", [d, 64, 2], rng)

    # -- forward --------------------------------------------------------------

    @staticmethod
    def _canonicalize_sensors(sensors: np.ndarray) -> np.ndarray:
        """Sort sensor tokens lexicographically so order never matters."""
        if sensors.ndim == 2:
            return sensors[np.lexsort(sensors.T[::-1])]
        return np.stack([s[np.lexsort(s.T[::-1])] for s in sensors])

    def encode(self, sensors: np.ndarray, queries: np.ndarray,
               tau: np.ndarray) -> tuple[Tensor, Tensor, Tensor | None, Tensor]:
        """Encoders for one batch: returns (Q, KV_op, KV_diff, raw_queries)."""
        dtype = self.config.np_dtype
        if sensors.ndim != 3 or queries.ndim != 3 or sensors.shape[-1] != 4 \
                or queries.shape[-1] != 4:
            raise ContractError(
                f"expected [batch, tokens, 4] inputs, got {sensors.shape} and "
                f"{queries.shape}")
        if not (np.all(np.isfinite(sensors)) and np.all(np.isfinite(queries))):
            raise ContractError("non-finite values in input tokens")

        sensors = self._canonicalize_sensors(np.asarray(sensors, dtype=dtype))
        raw_queries = Tensor(np.asarray(queries, dtype=dtype))
        embed = fourier_embed(np.asarray(tau, dtype=np.float64),
                              self.config.fourier).astype(dtype)

        if self.config.two_stream:
            kv_op = self.branch_norm(self.branch_encoder(Tensor(sensors)))
            kv_diff = self.diffusion_norm(
                self.diffusion_encoder(Tensor(embed[:, None, :])))
        else:
            stacked = np.concatenate(
                [sensors, np.broadcast_to(embed[:, None, :],
                                          sensors.shape[:2] + (embed.shape[-1],))],
                axis=-1)
            kv_op = self.branch_norm(self.branch_encoder(Tensor(stacked)))
            kv_diff = None
        q = self.query_encoder(raw_queries)
        return q, kv_op, kv_diff, raw_queries

    def forward_batch(self, sensors: np.ndarray, queries: np.ndarray,
                      tau: np.ndarray) -> Tensor:
        """Batched forward pass; returns the [batch, n_queries, 2] prediction."""
        q, kv_op, kv_diff, raw_queries = self.encode(sensors, queries, tau)
        for i, block in enumerate(self.blocks):
            q = block(q, kv_op, kv_diff, raw_queries)
            if not np.all(np.isfinite(q.data)):
                raise NumericError(f"non-finite activations after block {i}")
        return self.head(self.out_norm(q))

    def forward(self, inputs: ForwardInput) -> np.ndarray:
        """Single-sample inference; no gradient graph is recorded."""
        with no_grad():
            out = self.forward_batch(inputs.sensors[None],
                                     inputs.queries[None],
                                     np.array([inputs.tau], dtype=np.float64))
        return out.data[0]

    def count_parameters(self) -> int:
        return self.store.n_parameters()

    # -- checkpointing ----------------------------------------------------------

    def save_checkpoint(self, path: str) -> None:
        chunks = [CHECKPOINT_MAGIC,
                  struct.pack("<II", CHECKPOINT_VERSION, len(self.store.names()))]
        for name, p in self.store.items():
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<B", p.data.ndim))
            chunks.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            chunks.append(p.data.astype("<f4").tobytes())
        payload = b"".join(chunks)
        with open(path, "wb") as fh:
            fh.write(payload)
            fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))

    def load_checkpoint(self, path: str) -> None:
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
            raise ChecksumError(f"{path} is not a checkpoint file")
        payload, crc_bytes = raw[:-4], raw[-4:]
        if struct.unpack("<I", crc_bytes)[0] != (zlib.crc32(payload) & 0xFFFFFFFF):
            raise ChecksumError(f"{path}: CRC mismatch (truncated or corrupt)")
        version, count = struct.unpack_from("<II", payload, 4)
        if version != CHECKPOINT_VERSION:
            raise ChecksumError(f"unsupported checkpoint version {version}")

        offset = 12
        seen: set[str] = set()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", payload, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", payload, offset)
            offset += 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            values = np.frombuffer(payload, dtype="<f4", count=size,
                                   offset=offset).reshape(shape)
            offset += 4 * size
            if name not in self.store:
                raise UnknownTensorError(f"checkpoint tensor {name!r} not in model")
            p = self.store[name]
            if p.data.shape != tuple(shape):
                raise ShapeMismatchError(
                    f"tensor {name!r}: checkpoint shape {tuple(shape)} vs model "
                    f"{p.data.shape}")
            p.data = values.astype(self.config.np_dtype)
            seen.add(name)
        missing = set(self.store.names()) - seen
        if missing:
            raise UnknownTensorError(f"checkpoint misses tensors: {sorted(missing)}")
