"""The gated rotary-enhanced linear attention block and the stacked model.

Block wiring (pre-norm):

    H_g   = LayerNorm(H)
    Q, K  = H_g W_q, H_g W_k
    V     = H_g W_in + b_in          # the sole value transform; there is no
                                     # separate value-projection matrix
    O     = attention(Q, K, V)       # variant per config, causal
    S     = SiLU(CausalConv(V))      # depthwise rank-augmentation branch
    F     = O + S                    # additive fusion
    Gamma = gate(H_g W_gate + b_gate)
    out   = DropPath((Gamma ⊙ F) W_out + b_out) + H

followed by the position-wise MLP (LayerNorm, D -> 4D GELU -> D, two
dropouts, residual).  With W_out and the second MLP matrix zero-initialized
every layer is an exact identity at init.

Padding uses id 0 with left-aligned fill; padded positions keep their
(normalized) null-token rows, are excluded from attention sums and the conv
input via the key mask, and never reach the loss.
"""

import io
import zipfile
from dataclasses import dataclass

import numpy as np

from .attention import AttentionConfig, attend
from .config import ModelConfig
from .errors import (
    BoundsError,
    CheckpointFormatError,
    CheckpointNotFoundError,
    ContractError,
)
from .kernels import causal_conv_backward, causal_conv_forward
from .numerics import (
    Tensor,
    activation,
    dropout,
    drop_path,
    gather_rows,
    gelu,
    layer_norm,
    make_rng,
    matmul,
    record,
    select_position,
    silu,
    transpose2d,
)
from .positional import RopeTable


def trunc_normal(gen: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with values beyond 2*std resampled."""
    x = gen.normal(0.0, std, shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = gen.normal(0.0, std, int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


@dataclass
class GrelaBlockParams:
    """One block's parameters; note the absence of a value projection."""

    w_q: Tensor
    w_k: Tensor
    w_in: Tensor
    b_in: Tensor
    w_out: Tensor
    b_out: Tensor
    w_gate: Tensor
    b_gate: Tensor
    conv_kernel: Tensor  # (conv_width, D) depthwise taps; last tap = current step
    ln_gain: Tensor
    ln_bias: Tensor
    mlp_ln_gain: Tensor
    mlp_ln_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def named(self, prefix: str):
        return [(f"{prefix}.{name}", getattr(self, name))
                for name in self.__dataclass_fields__]


def _init_block(gen, cfg: ModelConfig, idx: int) -> GrelaBlockParams:
    d = cfg.dim

    def tn(shape):
        return Tensor(trunc_normal(gen, shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=True)

    return GrelaBlockParams(
        w_q=tn((d, d)), w_k=tn((d, d)),
        w_in=tn((d, d)), b_in=zeros(d),
        w_out=zeros((d, d)), b_out=zeros(d),  # zero out-proj: identity at init
        w_gate=tn((d, d)), b_gate=zeros(d),
        conv_kernel=tn((cfg.conv_width, d)),
        ln_gain=ones(d), ln_bias=zeros(d),
        mlp_ln_gain=ones(d), mlp_ln_bias=zeros(d),
        mlp_w1=tn((d, 4 * d)), mlp_b1=zeros(4 * d),
        mlp_w2=zeros((4 * d, d)), mlp_b2=zeros(d),
    )


class GrelaModel:
    """Embedding table, L blocks, rotation table, and the prediction tie-in."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        gen = make_rng((self.seed, 0))  # stream 0: parameter init
        self.embedding = Tensor(trunc_normal(gen, (config.vocab_size, config.dim)),
                                requires_grad=True, name="embedding")
        self.emb_ln_gain = Tensor(np.ones(config.dim), requires_grad=True)
        self.emb_ln_bias = Tensor(np.zeros(config.dim), requires_grad=True)
        self.blocks = [_init_block(gen, config, i) for i in range(config.layers)]
        self.rope = RopeTable(config.max_len, config.dim)
        self.attn_cfg = AttentionConfig(
            variant=config.variant, heads=config.heads, head_dim=config.head_dim,
            causal=True, eps=config.attn_eps, scale_n=config.scale_n,
            max_len=config.max_len)

    def parameters(self):
        """(name, tensor) pairs in a fixed, checkpoint-stable order."""
        out = [("embedding", self.embedding),
               ("emb_ln_gain", self.emb_ln_gain),
               ("emb_ln_bias", self.emb_ln_bias)]
        for i, block in enumerate(self.blocks):
            out.extend(block.named(f"block{i}"))
        return out

    def param_count(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def zero_grads(self):
        for _, t in self.parameters():
            t.zero_grad()

    def state_arrays(self) -> dict:
        return {name: t.data.copy() for name, t in self.parameters()}

    def load_state_arrays(self, state: dict):
        for name, t in self.parameters():
            src = state[name]
            if src.shape != t.data.shape:
                raise ContractError(
                    f"parameter {name}: shape {src.shape} != {t.data.shape}")
            t.data[...] = src


# ---------------------------------------------------------------------------
# block-level operations
# ---------------------------------------------------------------------------


def embed(model: GrelaModel, ids: np.ndarray, training: bool = False,
          rng=None) -> tuple:
    """Lookup -> Dropout -> LayerNorm; returns (H, key mask).

    ids: (B, N) ints with 0 = padding; rows are left-padded.
    """
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ContractError(f"batch must be (B, N), got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        raise BoundsError(
            f"item ids outside [0, {model.config.vocab_size})")
    h = gather_rows(model.embedding, ids)
    h = dropout(h, model.config.dropout, training, rng)
    h = layer_norm(h, model.emb_ln_gain, model.emb_ln_bias)
    mask = (ids != 0).astype(np.float64)
    return h, mask


def causal_conv(x: Tensor, kern: Tensor) -> Tensor:
    """Depthwise causal convolution over positions (tape op)."""
    out = Tensor(causal_conv_forward(x.data, kern.data))
    return record(out, (x, kern),
                  lambda g: causal_conv_backward(g, x.data, kern.data))


def rank_augmentation(v: Tensor, kern: Tensor) -> Tensor:
    """Local token-mixing branch: SiLU(CausalConv(V))."""
    return silu(causal_conv(v, kern))


def fuse(o: Tensor, s: Tensor) -> Tensor:
    """Additive fusion of the global (attention) and local (conv) paths."""
    return o + s


def gated_rank_selector(h_g: Tensor, fused: Tensor, params: GrelaBlockParams,
                        residual: Tensor, *, gate: str = "silu",
                        drop_rate: float = 0.0, training: bool = False,
                        rng=None) -> Tensor:
    """Soft per-position gate over the fused paths, out-projected, residual."""
    gamma = activation(gate, matmul(h_g, params.w_gate) + params.b_gate)
    inner = matmul(gamma * fused, params.w_out) + params.b_out
    return drop_path(inner, drop_rate, training, rng) + residual


def grela_block(h: Tensor, params: GrelaBlockParams, rope: RopeTable,
                attn_cfg: AttentionConfig, *, gate: str = "silu",
                drop_rate: float = 0.0, pad_mask: np.ndarray | None = None,
                training: bool = False, rng=None,
                conv_branch: bool = True) -> Tensor:
    h_g = layer_norm(h, params.ln_gain, params.ln_bias)
    q = matmul(h_g, params.w_q)
    k = matmul(h_g, params.w_k)
    v = matmul(h_g, params.w_in) + params.b_in
    o = attend(q, k, v, attn_cfg, rope=rope, pad_mask=pad_mask)
    if conv_branch:
        if pad_mask is None:
            v_local = v
        else:
            keep = np.broadcast_to(pad_mask[..., None], v.shape).copy()
            v_local = v * Tensor(keep)
        fused = fuse(o, rank_augmentation(v_local, params.conv_kernel))
    else:
        fused = o
    return gated_rank_selector(h_g, fused, params, h, gate=gate,
                               drop_rate=drop_rate, training=training, rng=rng)


def mlp(h3: Tensor, params: GrelaBlockParams, *, dropout_rate: float = 0.0,
        training: bool = False, rng=None) -> Tensor:
    """LayerNorm -> D x 4D GELU -> 4D x D, dropout inside and out, residual."""
    h4 = layer_norm(h3, params.mlp_ln_gain, params.mlp_ln_bias)
    hidden = dropout(gelu(matmul(h4, params.mlp_w1) + params.mlp_b1),
                     dropout_rate, training, rng)
    out = dropout(matmul(hidden, params.mlp_w2) + params.mlp_b2,
                  dropout_rate, training, rng)
    return out + h3


def forward_features(model: GrelaModel, ids: np.ndarray, training: bool = False,
                     rng=None, conv_branch: bool = True) -> Tensor:
    """Hidden representation (B, N, D) after all blocks and MLPs."""
    ids = np.asarray(ids)
    cfg = model.config
    if ids.ndim != 2:
        raise ContractError(f"batch must be (B, N), got shape {ids.shape}")
    if ids.shape[1] > cfg.max_len:
        raise ContractError(
            f"sequence length {ids.shape[1]} exceeds max_len {cfg.max_len}")
    if np.any(ids[:, -1] == 0):
        raise ContractError("empty (all-padding) sequence in batch")
    h, mask = embed(model, ids, training=training, rng=rng)
    for params in model.blocks:
        h = grela_block(h, params, model.rope, model.attn_cfg,
                        gate=cfg.gate, drop_rate=cfg.drop_path,
                        pad_mask=mask, training=training, rng=rng,
                        conv_branch=conv_branch)
        h = mlp(h, params, dropout_rate=cfg.dropout, training=training, rng=rng)
    return h


def forward(model: GrelaModel, ids: np.ndarray, training: bool = False,
            rng=None, conv_branch: bool = True) -> Tensor:
    """Full-vocabulary logits (B, |V|) from the last position of each row.

    Rows are left-padded, so the last position is the newest real item; an
    all-padding row has no prediction point and is rejected.
    """
    h = forward_features(model, ids, training=training, rng=rng,
                         conv_branch=conv_branch)
    last = select_position(h, -1)
    return matmul(last, transpose2d(model.embedding))


def mask_padding_logit(logits: np.ndarray) -> np.ndarray:
    """Exclude the reserved padding slot before ranking."""
    out = logits.copy()
    out[..., 0] = -np.inf
    return out


# ---------------------------------------------------------------------------
# checkpointing: zip archive of a text manifest + raw little-endian payload
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "recgrela-checkpoint"
CHECKPOINT_VERSION = 1
_FIXED_DATE = (2020, 1, 1, 0, 0, 0)  # reproducible archive bytes

_CONFIG_FIELDS = ("vocab_size", "dim", "heads", "layers", "max_len",
                  "conv_width", "dropout", "drop_path", "attn_eps",
                  "variant", "gate", "scale_n")


def save_checkpoint(model: GrelaModel, path, extra: dict | None = None):
    """Manifest (config, seed, parameter table) + '<f8' parameter payload."""
    manifest = io.StringIO()
    manifest.write(f"format {CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\n")
    manifest.write(f"seed {model.seed}\n")
    for key in _CONFIG_FIELDS:
        manifest.write(f"config {key} {getattr(model.config, key)}\n")
    for key, value in (extra or {}).items():
        manifest.write(f"extra {key} {value}\n")
    payload = io.BytesIO()
    offset = 0
    for name, tensor in model.parameters():
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        shape = ",".join(str(s) for s in arr.shape)
        manifest.write(f"param {name} {shape} {offset} {arr.size}\n")
        payload.write(arr.tobytes())
        offset += arr.size
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for arcname, data in (("manifest.txt", manifest.getvalue().encode()),
                              ("params.f64", payload.getvalue())):
            info = zipfile.ZipInfo(arcname, date_time=_FIXED_DATE)
            zf.writestr(info, data)


def _parse_config_value(key: str, raw: str):
    if key in ("dropout", "drop_path", "attn_eps"):
        return float(raw)
    if key in ("variant", "gate"):
        return raw
    if key == "scale_n":
        return raw == "True"
    return int(raw)


def load_checkpoint(path) -> tuple:
    """Rebuild the model bit-exactly; returns (model, extra-metadata dict)."""
    try:
        zf = zipfile.ZipFile(path)
    except FileNotFoundError:
        raise CheckpointNotFoundError(f"checkpoint not found: {path}") from None
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointFormatError(f"unreadable checkpoint {path}: {exc}") from None
    with zf:
        try:
            manifest = zf.read("manifest.txt").decode()
            payload = zf.read("params.f64")
        except KeyError as exc:
            raise CheckpointFormatError(f"checkpoint missing member: {exc}") from None
    lines = manifest.splitlines()
    if not lines or not lines[0].startswith(
            f"format {CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}"):
        raise CheckpointFormatError(f"unsupported checkpoint header: {lines[:1]}")
    seed = 0
    cfg_values = {}
    extra = {}
    params = []
    for line in lines[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "seed":
            seed = int(rest)
        elif kind == "config":
            key, _, raw = rest.partition(" ")
            cfg_values[key] = _parse_config_value(key, raw)
        elif kind == "extra":
            key, _, raw = rest.partition(" ")
            extra[key] = raw
        elif kind == "param":
            name, shape_s, offset_s, count_s = rest.split(" ")
            shape = tuple(int(s) for s in shape_s.split(",") if s)
            params.append((name, shape, int(offset_s), int(count_s)))
    model = GrelaModel(ModelConfig(**cfg_values), seed=seed)
    flat = np.frombuffer(payload, dtype="<f8")
    table = dict(model.parameters())
    seen = set()
    for name, shape, offset, count in params:
        if name not in table:
            raise CheckpointFormatError(f"unknown parameter {name!r} in checkpoint")
        arr = flat[offset:offset + count].reshape(shape)
        table[name].data[...] = arr
        seen.add(name)
    missing = set(table) - seen
    if missing:
        raise CheckpointFormatError(f"checkpoint missing parameters: {sorted(missing)}")
    return model, extra
