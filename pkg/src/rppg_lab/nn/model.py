"""Transformer encoder/decoder over patch tokens, sized for desk-scale
training but with the paper-scale profile selectable.

Blocks are pre-norm with multi-head self-attention, MLP ratio 4 and
GELU. Positional embeddings are fixed 2-D sine-cosine; the class token
is kept through both stages so pre-training, fine-tuning and linear
probing share one architecture. Weights are truncated normal (std 0.02),
biases zero.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ShapeMismatchError
from ..stmap import MaskPlan
from . import tensor as T
from .tensor import Tensor

LN_EPS = 1e-6
INIT_STD = 0.02
MLP_RATIO = 4


@dataclass
class EncoderConfig:
    depth: int = 12
    dim: int = 768
    heads: int = 12
    patch_size: int = 16
    in_channels: int = 3
    seq_side: int = 14  # G: patches per map side
    use_class_token: bool = True

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("encoder depth must be >= 1")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 4 != 0:
            raise ConfigError("dim must be divisible by 4 for 2-D sin-cos embeddings")


@dataclass
class DecoderConfig:
    depth: int = 8
    dim: int = 128
    heads: int = 8
    patch_size: int = 16
    in_channels: int = 3
    seq_side: int = 14

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("decoder depth must be >= 1")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 4 != 0:
            raise ConfigError("dim must be divisible by 4 for 2-D sin-cos embeddings")


def desk_profile(in_channels: int = 6, side: int = 64, patch_size: int = 8):
    """Small profile used by the test/acceptance suite (maps 64x64)."""
    g = side // patch_size
    enc = EncoderConfig(depth=4, dim=64, heads=4, patch_size=patch_size, in_channels=in_channels, seq_side=g)
    dec = DecoderConfig(depth=2, dim=32, heads=4, patch_size=patch_size, in_channels=in_channels, seq_side=g)
    return enc, dec


def paper_profile(in_channels: int = 3, side: int = 224, patch_size: int = 16):
    """ViT-Base encoder (12 blocks, 768 dims) + 8-block/128-dim decoder."""
    g = side // patch_size
    enc = EncoderConfig(depth=12, dim=768, heads=12, patch_size=patch_size, in_channels=in_channels, seq_side=g)
    dec = DecoderConfig(depth=8, dim=128, heads=8, patch_size=patch_size, in_channels=in_channels, seq_side=g)
    return enc, dec


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) resampled until everything lies within 2 std."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x.astype(dtype)


def sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim // 2))
    args = pos[:, None] * omega[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def sincos_2d(dim: int, grid: int) -> np.ndarray:
    """Fixed [grid^2, dim] 2-D sine-cosine positional table (row-major)."""
    ys, xs = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    emb_y = sincos_1d(dim // 2, ys.ravel())
    emb_x = sincos_1d(dim // 2, xs.ravel())
    return np.concatenate([emb_y, emb_x], axis=1)


class _Params:
    """Ordered name -> Tensor store shared by all model classes."""

    def __init__(self, dtype):
        self.dtype = dtype
        self.table: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        t = T.parameter(value, dtype=self.dtype)
        self.table[name] = t
        return t

    def zero_grads(self) -> None:
        for p in self.table.values():
            p.zero_grad()

    def values(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.table.items()}

    def load(self, values: dict[str, np.ndarray], partial: bool = False) -> list[str]:
        """Copy arrays by name. Strict mode rejects any mismatch; partial
        mode copies the intersection (shapes must still agree). Returns
        the list of loaded names."""
        loaded = []
        if not partial:
            missing = set(self.table) - set(values)
            extra = set(values) - set(self.table)
            if missing or extra:
                raise ShapeMismatchError(
                    f"checkpoint does not match model (missing={sorted(missing)[:4]}, extra={sorted(extra)[:4]})"
                )
        for name, arr in values.items():
            if name not in self.table:
                continue
            tgt = self.table[name]
            if tuple(arr.shape) != tgt.shape:
                raise ShapeMismatchError(f"shape mismatch for '{name}': {arr.shape} vs {tgt.shape}")
            tgt.data = arr.astype(self.dtype)
            loaded.append(name)
        return loaded


def _init_blocks(params: _Params, rng, prefix: str, depth: int, dim: int):
    hidden = MLP_RATIO * dim
    for i in range(depth):
        p = f"{prefix}.blocks.{i}"
        params.add(f"{p}.ln1.gain", np.ones(dim))
        params.add(f"{p}.ln1.bias", np.zeros(dim))
        params.add(f"{p}.attn.qkv.weight", trunc_normal(rng, (dim, 3 * dim), INIT_STD, np.float64))
        params.add(f"{p}.attn.qkv.bias", np.zeros(3 * dim))
        params.add(f"{p}.attn.proj.weight", trunc_normal(rng, (dim, dim), INIT_STD, np.float64))
        params.add(f"{p}.attn.proj.bias", np.zeros(dim))
        params.add(f"{p}.ln2.gain", np.ones(dim))
        params.add(f"{p}.ln2.bias", np.zeros(dim))
        params.add(f"{p}.mlp.fc1.weight", trunc_normal(rng, (dim, hidden), INIT_STD, np.float64))
        params.add(f"{p}.mlp.fc1.bias", np.zeros(hidden))
        params.add(f"{p}.mlp.fc2.weight", trunc_normal(rng, (hidden, dim), INIT_STD, np.float64))
        params.add(f"{p}.mlp.fc2.bias", np.zeros(dim))


def _run_blocks(params: _Params, prefix: str, depth: int, heads: int, x: Tensor) -> Tensor:
    for i in range(depth):
        p = f"{prefix}.blocks.{i}"
        t = params.table
        y = T.layer_norm(x, t[f"{p}.ln1.gain"], t[f"{p}.ln1.bias"], LN_EPS)
        x = x + _attention(y, t[f"{p}.attn.qkv.weight"], t[f"{p}.attn.qkv.bias"],
                           t[f"{p}.attn.proj.weight"], t[f"{p}.attn.proj.bias"], heads)
        y = T.layer_norm(x, t[f"{p}.ln2.gain"], t[f"{p}.ln2.bias"], LN_EPS)
        y = T.linear(y, t[f"{p}.mlp.fc1.weight"], t[f"{p}.mlp.fc1.bias"])
        y = T.gelu(y)
        y = T.linear(y, t[f"{p}.mlp.fc2.weight"], t[f"{p}.mlp.fc2.bias"])
        x = x + y
    return x


def _attention(x: Tensor, w_qkv, b_qkv, w_proj, b_proj, heads: int) -> Tensor:
    b, n, dim = x.shape
    dh = dim // heads
    qkv = T.linear(x, w_qkv, b_qkv)  # [B, N, 3*dim]
    qkv = qkv.reshape(b, n, 3, heads, dh).transpose((2, 0, 3, 1, 4))  # [3, B, H, N, dh]
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))  # [B, H, N, N]
    att = T.softmax(scores, axis=-1)
    out = (att @ v).transpose((0, 2, 1, 3)).reshape(b, n, dim)
    return T.linear(out, w_proj, b_proj)


class MaskedAutoencoder:
    """Asymmetric encoder/decoder reconstructing masked STMap patches."""

    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, seed: int = 0, dtype: str = "f32"):
        enc_cfg.validate()
        dec_cfg.validate()
        if enc_cfg.seq_side != dec_cfg.seq_side or enc_cfg.patch_size != dec_cfg.patch_size:
            raise ConfigError("encoder/decoder grids must agree")
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg
        self.dtype = T.DTYPES[dtype]
        self.patch_dim = enc_cfg.patch_size**2 * enc_cfg.in_channels
        self.n_patches = enc_cfg.seq_side**2
        rng = np.random.default_rng(seed)

        p = self.params = _Params(self.dtype)
        p.add("encoder.patch_embed.weight", trunc_normal(rng, (self.patch_dim, enc_cfg.dim), INIT_STD, np.float64))
        p.add("encoder.patch_embed.bias", np.zeros(enc_cfg.dim))
        p.add("encoder.cls_token", trunc_normal(rng, (1, 1, enc_cfg.dim), INIT_STD, np.float64))
        _init_blocks(p, rng, "encoder", enc_cfg.depth, enc_cfg.dim)
        p.add("encoder.norm.gain", np.ones(enc_cfg.dim))
        p.add("encoder.norm.bias", np.zeros(enc_cfg.dim))

        p.add("decoder.embed.weight", trunc_normal(rng, (enc_cfg.dim, dec_cfg.dim), INIT_STD, np.float64))
        p.add("decoder.embed.bias", np.zeros(dec_cfg.dim))
        p.add("decoder.mask_token", trunc_normal(rng, (1, 1, dec_cfg.dim), INIT_STD, np.float64))
        _init_blocks(p, rng, "decoder", dec_cfg.depth, dec_cfg.dim)
        p.add("decoder.norm.gain", np.ones(dec_cfg.dim))
        p.add("decoder.norm.bias", np.zeros(dec_cfg.dim))
        p.add("decoder.head.weight", trunc_normal(rng, (dec_cfg.dim, self.patch_dim), INIT_STD, np.float64))
        p.add("decoder.head.bias", np.zeros(self.patch_dim))

        self.pos_enc = sincos_2d(enc_cfg.dim, enc_cfg.seq_side).astype(self.dtype)
        self.pos_dec = sincos_2d(dec_cfg.dim, dec_cfg.seq_side).astype(self.dtype)

    # -- batched forward ------------------------------------------------

    def encode_batch(self, kept_patches: np.ndarray, kept_idx: np.ndarray) -> Tensor:
        """kept_patches [B, L, P^2*C] + kept_idx [B, L] -> tokens [B, L+1, De]."""
        t = self.params.table
        batch, n_kept, d = kept_patches.shape
        if d != self.patch_dim:
            raise ShapeMismatchError(f"patch width {d} != {self.patch_dim}")
        x = T.linear(T.constant(kept_patches, self.dtype), t["encoder.patch_embed.weight"],
                     t["encoder.patch_embed.bias"])
        x = x + T.constant(self.pos_enc[kept_idx], self.dtype)
        cls = t["encoder.cls_token"].broadcast_to((batch, 1, self.enc_cfg.dim))
        x = T.concat([cls, x], axis=1)
        x = _run_blocks(self.params, "encoder", self.enc_cfg.depth, self.enc_cfg.heads, x)
        return T.layer_norm(x, t["encoder.norm.gain"], t["encoder.norm.bias"], LN_EPS)

    def decode_batch(self, encoded: Tensor, ids_restore: np.ndarray) -> Tensor:
        """tokens [B, L+1, De] + ids_restore [B, G^2] -> patches [B, G^2, P^2*C]."""
        t = self.params.table
        batch = encoded.shape[0]
        y = T.linear(encoded, t["decoder.embed.weight"], t["decoder.embed.bias"])
        cls, rest = y[:, :1, :], y[:, 1:, :]
        n_masked = self.n_patches - rest.shape[1]
        mask = t["decoder.mask_token"].broadcast_to((batch, n_masked, self.dec_cfg.dim))
        full = T.concat([rest, mask], axis=1)
        full = T.gather_rows(full, ids_restore)  # back to canonical patch order
        full = full + T.constant(self.pos_dec[None, :, :], self.dtype)
        x = T.concat([cls, full], axis=1)
        x = _run_blocks(self.params, "decoder", self.dec_cfg.depth, self.dec_cfg.heads, x)
        x = T.layer_norm(x, t["decoder.norm.gain"], t["decoder.norm.bias"], LN_EPS)
        x = T.linear(x, t["decoder.head.weight"], t["decoder.head.bias"])
        return x[:, 1:, :]

    # -- single-clip surface ------------------------------------------------

    def encoder_forward(self, kept_patches: np.ndarray, plan: MaskPlan) -> Tensor:
        """Kept patches in plan.kept_indices order -> [L_k+1, De] tokens."""
        if kept_patches.shape[0] != plan.kept_indices.size:
            raise ShapeMismatchError(
                f"{kept_patches.shape[0]} patches vs {plan.kept_indices.size} kept indices"
            )
        out = self.encode_batch(kept_patches[None], plan.kept_indices[None])
        return out.reshape(out.shape[1], out.shape[2])

    def decoder_forward(self, encoded: Tensor, plan: MaskPlan) -> Tensor:
        """Encoded tokens [L_k+1, De] -> reconstructed patches [G^2, P^2*C]."""
        out = self.decode_batch(
            encoded.reshape(1, encoded.shape[0], encoded.shape[1]), plan.ids_restore()[None]
        )
        return out.reshape(out.shape[1], out.shape[2])

    def reconstruct(self, patches: np.ndarray, plan: MaskPlan) -> Tensor:
        """Full pipeline for one clip's [G^2, P^2*C] patch matrix."""
        kept = patches[plan.kept_indices]
        return self.decoder_forward(self.encoder_forward(kept, plan), plan)


class _EncoderOnly:
    """Shared full-patch encoder trunk for the fine-tune/probe models."""

    def __init__(self, enc_cfg: EncoderConfig, seed: int, dtype: str):
        enc_cfg.validate()
        self.enc_cfg = enc_cfg
        self.dtype = T.DTYPES[dtype]
        self.patch_dim = enc_cfg.patch_size**2 * enc_cfg.in_channels
        self.n_patches = enc_cfg.seq_side**2
        rng = np.random.default_rng(seed)
        p = self.params = _Params(self.dtype)
        p.add("encoder.patch_embed.weight", trunc_normal(rng, (self.patch_dim, enc_cfg.dim), INIT_STD, np.float64))
        p.add("encoder.patch_embed.bias", np.zeros(enc_cfg.dim))
        p.add("encoder.cls_token", trunc_normal(rng, (1, 1, enc_cfg.dim), INIT_STD, np.float64))
        _init_blocks(p, rng, "encoder", enc_cfg.depth, enc_cfg.dim)
        p.add("encoder.norm.gain", np.ones(enc_cfg.dim))
        p.add("encoder.norm.bias", np.zeros(enc_cfg.dim))
        self.pos_enc = sincos_2d(enc_cfg.dim, enc_cfg.seq_side).astype(self.dtype)
        self._rng = rng

    def encode_full(self, patches: np.ndarray) -> Tensor:
        """All patches, no masking: [B, G^2, P^2*C] -> [B, G^2+1, De]."""
        t = self.params.table
        batch = patches.shape[0]
        if patches.shape[1] != self.n_patches or patches.shape[2] != self.patch_dim:
            raise ShapeMismatchError(f"expected [B, {self.n_patches}, {self.patch_dim}], got {patches.shape}")
        x = T.linear(T.constant(patches, self.dtype), t["encoder.patch_embed.weight"],
                     t["encoder.patch_embed.bias"])
        x = x + T.constant(self.pos_enc[None, :, :], self.dtype)
        cls = t["encoder.cls_token"].broadcast_to((batch, 1, self.enc_cfg.dim))
        x = T.concat([cls, x], axis=1)
        x = _run_blocks(self.params, "encoder", self.enc_cfg.depth, self.enc_cfg.heads, x)
        return T.layer_norm(x, t["encoder.norm.gain"], t["encoder.norm.bias"], LN_EPS)


class RppgRegressor(_EncoderOnly):
    """Full-patch encoder + linear head predicting a length-T rPPG signal
    from the flattened non-class tokens."""

    def __init__(self, enc_cfg: EncoderConfig, out_len: int, seed: int = 0, dtype: str = "f32"):
        super().__init__(enc_cfg, seed, dtype)
        self.out_len = out_len
        feat = self.n_patches * enc_cfg.dim
        self.params.add("head.weight", trunc_normal(self._rng, (feat, out_len), INIT_STD, np.float64))
        self.params.add("head.bias", np.zeros(out_len))

    def forward(self, patches: np.ndarray) -> Tensor:
        """[B, G^2, P^2*C] -> predicted signals [B, out_len]."""
        tokens = self.encode_full(patches)
        feats = tokens[:, 1:, :].reshape(patches.shape[0], self.n_patches * self.enc_cfg.dim)
        return T.linear(feats, self.params.table["head.weight"], self.params.table["head.bias"])


class LinearProbe(_EncoderOnly):
    """Frozen encoder + linear classifier over HR bins on the class token."""

    def __init__(self, enc_cfg: EncoderConfig, n_bins: int, seed: int = 0, dtype: str = "f32"):
        super().__init__(enc_cfg, seed, dtype)
        self.n_bins = n_bins
        self.params.add("probe.weight", trunc_normal(self._rng, (enc_cfg.dim, n_bins), INIT_STD, np.float64))
        self.params.add("probe.bias", np.zeros(n_bins))

    def head_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.table.items() if k.startswith("probe.")}

    def forward(self, patches: np.ndarray) -> Tensor:
        """[B, G^2, P^2*C] -> logits [B, n_bins] from the class token."""
        tokens = self.encode_full(patches)
        cls = tokens[:, 0, :]
        return T.linear(cls, self.params.table["probe.weight"], self.params.table["probe.bias"])
