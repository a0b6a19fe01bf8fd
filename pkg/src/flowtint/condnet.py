"""Toy conditional velocity network.

Three token branches share one sequence: reference-image patches, then
source-image patches, then the main branch (prompt tokens followed by the
noisy-latent patches).  Image branches attend only within themselves; the
main branch attends to both image branches and causally to itself.

All base weights are frozen after initialisation.  Training happens in
low-rank adapters stacked on every attention projection and on the output
head.
"""

from dataclasses import dataclass, field as dc_field
import hashlib
import io
import json
import math
import re
import struct

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, DataError, DimensionError, DomainError, LayoutError, NumericError
from .flow import sinusoidal_embedding
from .rng import torch_generator

COLD_START = "cold_start"
POST_TRAINING = "post_training"
STAGE_TAGS = (COLD_START, POST_TRAINING)

DEFAULT_PROMPT = "transfer the color preset of the reference image to the source image"

VOCAB = (
    "<pad>", "<unk>", "transfer", "color", "colour", "preset", "reference", "source",
    "image", "photo", "tone", "grade", "grading", "style", "match", "apply", "filter",
    "look", "retouch", "palette", "warm", "cool", "bright", "dark", "saturation",
)
_STOPWORDS = {"the", "of", "to", "a", "an", "and", "onto", "into", "from", "for", "with"}


def tokenize(prompt: str, max_len: int = 8) -> tuple[int, ...]:
    """Map a task phrase to at most ``max_len`` ids from the fixed vocabulary."""
    words = [w for w in re.findall(r"[a-z]+", prompt.lower()) if w not in _STOPWORDS]
    ids = [VOCAB.index(w) if w in VOCAB else 1 for w in words]
    if len(ids) > max_len:
        raise ConfigurationError(f"prompt has {len(ids)} tokens, maximum is {max_len}")
    return tuple(ids)


@dataclass(frozen=True)
class BranchLayout:
    ref_span: range
    src_span: range
    main_span: range

    def validate(self):
        spans = [self.ref_span, self.src_span, self.main_span]
        if any(len(s) == 0 for s in spans):
            raise LayoutError("every branch needs at least one token")
        if any(s.step != 1 for s in spans):
            raise LayoutError("spans must be contiguous")
        if self.ref_span.start != 0:
            raise LayoutError("reference span must start at token 0")
        if self.src_span.start != self.ref_span.stop or self.main_span.start != self.src_span.stop:
            raise LayoutError("spans must be disjoint, ordered ref < src < main and cover the sequence")
        return self

    @property
    def length(self) -> int:
        return self.main_span.stop


def build_mask(layout: BranchLayout) -> torch.Tensor:
    """Boolean (n, n) matrix; entry (q, k) is True iff query q may read key k."""
    layout.validate()
    n = layout.length
    allowed = torch.zeros((n, n), dtype=torch.bool)
    r, s, m = layout.ref_span, layout.src_span, layout.main_span
    allowed[r.start:r.stop, r.start:r.stop] = True
    allowed[s.start:s.stop, s.start:s.stop] = True
    allowed[m.start:m.stop, r.start:s.stop] = True
    allowed[m.start:m.stop, m.start:m.stop] = torch.tril(
        torch.ones((len(m), len(m)), dtype=torch.bool))
    return allowed


@dataclass
class ConditioningContext:
    source: np.ndarray
    reference: np.ndarray
    prompt: tuple = dc_field(default_factory=lambda: tokenize(DEFAULT_PROMPT))
    context_id: str = ""

    def __post_init__(self):
        if self.source.shape != self.reference.shape:
            raise DimensionError(
                f"source {self.source.shape} and reference {self.reference.shape} must match")
        if isinstance(self.prompt, str):
            self.prompt = tokenize(self.prompt)


@dataclass
class ContextBatch:
    source: torch.Tensor      # (B, H, W, 3)
    reference: torch.Tensor   # (B, H, W, 3)
    prompt: torch.Tensor      # (B, L) int64, zero padded

    @classmethod
    def collate(cls, contexts, max_prompt: int, dtype=torch.float32):
        contexts = list(contexts)
        ids = torch.zeros((len(contexts), max_prompt), dtype=torch.int64)
        for i, c in enumerate(contexts):
            if len(c.prompt) > max_prompt:
                raise ConfigurationError(f"prompt longer than {max_prompt} tokens")
            ids[i, :len(c.prompt)] = torch.tensor(c.prompt, dtype=torch.int64)
        src = torch.as_tensor(np.stack([c.source for c in contexts])).to(dtype)
        ref = torch.as_tensor(np.stack([c.reference for c in contexts])).to(dtype)
        return cls(src, ref, ids)

    def __len__(self):
        return self.source.shape[0]

    def repeat(self, n: int) -> "ContextBatch":
        if len(self) != 1:
            raise DimensionError("only single-context batches can be repeated")
        return ContextBatch(self.source.expand(n, *self.source.shape[1:]),
                            self.reference.expand(n, *self.reference.shape[1:]),
                            self.prompt.expand(n, -1))


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 16
    patch: int = 2
    width: int = 64
    heads: int = 2
    blocks: int = 2
    mlp_ratio: int = 4
    max_prompt: int = 8
    vocab: int = len(VOCAB)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    def layout(self) -> BranchLayout:
        n = self.n_patches
        return BranchLayout(range(0, n), range(n, 2 * n), range(2 * n, 3 * n + self.max_prompt))


def patchify(img: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, H, W, 3) -> (B, H/P * W/P, P*P*3), row-major over the patch grid."""
    b, h, w, c = img.shape
    x = img.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def unpatchify(tokens: torch.Tensor, patch: int, size: int) -> torch.Tensor:
    b = tokens.shape[0]
    g = size // patch
    x = tokens.reshape(b, g, g, patch, patch, 3)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, size, size, 3)


def _grid_position_embedding(grid: int, width: int) -> torch.Tensor:
    # 2-D sinusoid: half the channels encode rows, half encode columns
    quarter = width // 4
    freqs = 1.0 / (100.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    rows, cols = torch.meshgrid(torch.arange(grid, dtype=torch.float64),
                                torch.arange(grid, dtype=torch.float64), indexing="ij")
    parts = []
    for coord in (rows.reshape(-1), cols.reshape(-1)):
        ang = coord[:, None] * freqs[None, :]
        parts += [torch.sin(ang), torch.cos(ang)]
    return torch.cat(parts, dim=-1)


class LowRankAdapter(nn.Module):
    """``delta_W = (alpha / rank) * B @ A`` with B zero at creation."""

    def __init__(self, in_dim, out_dim, rank, alpha, stage_tag, generator, dtype):
        super().__init__()
        if rank < 1 or rank > min(in_dim, out_dim):
            raise ConfigurationError(f"rank {rank} invalid for a {out_dim}x{in_dim} map")
        bound = 1.0 / math.sqrt(in_dim)
        a = (torch.rand((rank, in_dim), generator=generator, dtype=torch.float64) * 2 - 1) * bound
        self.A = nn.Parameter(a.to(dtype))
        self.B = nn.Parameter(torch.zeros((out_dim, rank), dtype=dtype))
        self.rank = rank
        self.alpha = float(alpha)
        self.stage_tag = stage_tag

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> torch.Tensor:
        return self.scale * (self.B @ self.A)


class AdaptedLinear(nn.Module):
    """Frozen dense map plus an ordered stack of low-rank adapters."""

    def __init__(self, in_dim, out_dim, generator, dtype, bias=True):
        super().__init__()
        bound = 1.0 / math.sqrt(in_dim)
        w = (torch.rand((out_dim, in_dim), generator=generator, dtype=torch.float64) * 2 - 1) * bound
        self.weight = nn.Parameter(w.to(dtype), requires_grad=False)
        self.bias = nn.Parameter(torch.zeros(out_dim, dtype=dtype), requires_grad=False) if bias else None
        self.adapters = nn.ModuleList()

    def effective_weight(self) -> torch.Tensor:
        w = self.weight
        for ad in self.adapters:
            w = w + ad.delta()
        return w

    def forward(self, x):
        y = x @ self.effective_weight().T
        return y if self.bias is None else y + self.bias


class Block(nn.Module):
    def __init__(self, cfg: NetConfig, gen, dtype):
        super().__init__()
        d = cfg.width
        self.heads = cfg.heads
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, dtype=dtype)
        self.q = AdaptedLinear(d, d, gen, dtype)
        self.k = AdaptedLinear(d, d, gen, dtype)
        self.v = AdaptedLinear(d, d, gen, dtype)
        self.o = AdaptedLinear(d, d, gen, dtype)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False, dtype=dtype)
        self.fc1 = AdaptedLinear(d, d * cfg.mlp_ratio, gen, dtype)
        self.fc2 = AdaptedLinear(d * cfg.mlp_ratio, d, gen, dtype)

    def attention(self, h, mask):
        b, n, d = h.shape
        hd = d // self.heads
        q = self.q(h).reshape(b, n, self.heads, hd).transpose(1, 2)
        k = self.k(h).reshape(b, n, self.heads, hd).transpose(1, 2)
        v = self.v(h).reshape(b, n, self.heads, hd).transpose(1, 2)
        logits = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        logits = logits.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, n, d)
        return self.o(out)

    def forward(self, x, mask):
        x = x + self.attention(self.norm1(x), mask)
        return x + self.fc2(torch.nn.functional.gelu(self.fc1(self.norm2(x))))


class VelocityField(nn.Module):
    """``v_theta(x_t, c, t)`` over (B, H, W, 3) latents in image space."""

    # adapters attach to these linear maps in every block, plus the head
    ADAPTED = ("q", "k", "v", "o")

    def __init__(self, cfg: NetConfig = NetConfig(), seed: int = 0, dtype=torch.float32,
                 zero_head: bool = False):
        super().__init__()
        if cfg.image_size % cfg.patch:
            raise ConfigurationError("image size must be a multiple of the patch size")
        if cfg.width % 4 or cfg.width % cfg.heads:
            raise ConfigurationError("width must be divisible by 4 and by the head count")
        self.cfg = cfg
        self.seed = seed
        self.dtype = dtype
        self.step_counter = 0
        gen = torch_generator(seed, "condnet-base")
        d = cfg.width
        # one patch embedding shared by all three image branches
        self.embed = AdaptedLinear(cfg.patch_dim, d, gen, dtype)
        tok = torch.randn((cfg.vocab, d), generator=gen, dtype=torch.float64) * 0.5
        self.token_embed = nn.Parameter(tok.to(dtype), requires_grad=False)
        branch = torch.randn((3, d), generator=gen, dtype=torch.float64) * 0.5
        self.branch_embed = nn.Parameter(branch.to(dtype), requires_grad=False)
        self.time_proj = AdaptedLinear(d, d, gen, dtype)
        self.blocks = nn.ModuleList([Block(cfg, gen, dtype) for _ in range(cfg.blocks)])
        self.norm_out = nn.LayerNorm(d, elementwise_affine=False, dtype=dtype)
        self.head = AdaptedLinear(d, cfg.patch_dim, gen, dtype)
        if zero_head:
            with torch.no_grad():
                self.head.weight.zero_()
                self.head.bias.zero_()
        self.register_buffer("pos_embed", _grid_position_embedding(cfg.grid, d).to(dtype))
        self.register_buffer("mask", build_mask(cfg.layout()))
        self.adapter_specs: list[tuple[str, int, float]] = []
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def image_shape(self):
        s = self.cfg.image_size
        return (s, s, 3)

    @property
    def layout(self) -> BranchLayout:
        return self.cfg.layout()

    def adapted_layers(self):
        for blk in self.blocks:
            for name in self.ADAPTED:
                yield getattr(blk, name)
        yield self.head

    def base_parameters(self):
        """Named base tensors in checkpoint order (adapters excluded)."""
        for name, p in self.named_parameters():
            if ".adapters." not in name:
                yield name, p

    def adapter_parameters(self, stage_tag=None):
        for name, p in self.named_parameters():
            if ".adapters." in name:
                idx = int(name.split(".adapters.")[1].split(".")[0])
                if stage_tag is None or self.adapter_specs[idx][0] == stage_tag:
                    yield name, p

    def active_parameters(self):
        return [(n, p) for n, p in self.adapter_parameters() if p.requires_grad]

    def set_trainable(self, stage_tag):
        """Unfreeze exactly the adapters tagged ``stage_tag``; freeze all others.

        ``None`` freezes everything.
        """
        for _, p in self.named_parameters():
            p.requires_grad_(False)
        if stage_tag is None:
            return
        for _, p in self.adapter_parameters(stage_tag):
            p.requires_grad_(True)

    def has_adapter(self, stage_tag) -> bool:
        return any(tag == stage_tag for tag, _, _ in self.adapter_specs)

    def encode_tokens(self, xt, ctx: ContextBatch, t):
        cfg = self.cfg
        b = xt.shape[0]
        ref = self.embed(patchify(ctx.reference, cfg.patch)) + self.pos_embed + self.branch_embed[0]
        src = self.embed(patchify(ctx.source, cfg.patch)) + self.pos_embed + self.branch_embed[1]
        lat = self.embed(patchify(xt, cfg.patch)) + self.pos_embed + self.branch_embed[2]
        txt = self.token_embed[ctx.prompt] + self.branch_embed[2]
        temb = self.time_proj(sinusoidal_embedding(t, cfg.width).to(self.dtype))[:, None, :]
        main = torch.cat([txt, lat], dim=1) + temb
        return torch.cat([ref, src, main], dim=1)

    def features(self, xt, ctx: ContextBatch, t):
        """Post-attention token features, shape (B, n_tokens, width)."""
        x = self.encode_tokens(xt, ctx, t)
        for blk in self.blocks:
            x = blk(x, self.mask)
        return x

    def forward(self, xt, context, t):
        single = xt.ndim == 3
        if single:
            xt = xt[None]
        if tuple(xt.shape[1:]) != self.image_shape:
            raise DimensionError(f"latent shape {tuple(xt.shape[1:])} != {self.image_shape}")
        xt = xt.to(self.dtype)
        b = xt.shape[0]
        if not isinstance(t, torch.Tensor) or t.ndim == 0:
            t = torch.full((b,), float(t), dtype=torch.float64)
        if bool(((t < 0) | (t > 1)).any()):
            raise DomainError("t must lie in [0, 1]")
        ctx = as_batch(context, b, self.cfg.max_prompt, self.dtype)
        h = self.features(xt, ctx, t)
        if not bool(torch.isfinite(h).all()):
            raise NumericError("non-finite activation in velocity network")
        lat = h[:, -self.cfg.n_patches:, :]
        out = unpatchify(self.head(self.norm_out(lat)), self.cfg.patch, self.cfg.image_size)
        return out[0] if single else out


def as_batch(context, b, max_prompt, dtype):
    if isinstance(context, ConditioningContext):
        ctx = ContextBatch.collate([context], max_prompt, dtype)
    elif isinstance(context, ContextBatch):
        ctx = context
    else:
        ctx = ContextBatch.collate(context, max_prompt, dtype)
    if len(ctx) == 1 and b > 1:
        ctx = ctx.repeat(b)
    if len(ctx) != b:
        raise DimensionError(f"context batch {len(ctx)} does not match latent batch {b}")
    if ctx.source.dtype != dtype:
        ctx = ContextBatch(ctx.source.to(dtype), ctx.reference.to(dtype), ctx.prompt)
    return ctx


def attach_adapter(field: VelocityField, rank: int = 4, alpha: float = 8.0,
                   stage_tag: str = COLD_START) -> VelocityField:
    """Append a no-op adapter (B = 0) to every adapted map of ``field``."""
    if stage_tag not in STAGE_TAGS:
        raise ConfigurationError(f"unknown stage tag {stage_tag!r}")
    idx = len(field.adapter_specs)
    gen = torch_generator(field.seed, "adapter", idx)
    for layer in field.adapted_layers():
        out_dim, in_dim = layer.weight.shape
        layer.adapters.append(LowRankAdapter(in_dim, out_dim, rank, alpha, stage_tag, gen, field.dtype))
    field.adapter_specs.append((stage_tag, rank, float(alpha)))
    # new adapters start frozen; set_trainable() decides what learns
    for layer in field.adapted_layers():
        for p in layer.adapters[idx].parameters():
            p.requires_grad_(False)
    return field


def grad(field: VelocityField, loss_closure):
    """Gradients of ``loss_closure(field)`` w.r.t. the active adapter parameters.

    Returns ``(loss, {name: gradient})``.  Frozen tensors never appear in
    the mapping.
    """
    active = field.active_parameters()
    loss = loss_closure(field)
    if not bool(torch.isfinite(loss)):
        raise NumericError(f"loss is not finite: {float(loss)}")
    if not active:
        return loss.detach(), {}
    grads = torch.autograd.grad(loss, [p for _, p in active], allow_unused=True)
    out = {}
    for (name, p), g in zip(active, grads):
        out[name] = torch.zeros_like(p) if g is None else g
    return loss.detach(), out


def tensor_digest(named) -> str:
    """SHA-256 over tensors in the given order, as little-endian float32."""
    h = hashlib.sha256()
    for name, p in named:
        h.update(name.encode())
        h.update(p.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def base_digest(field: VelocityField) -> str:
    return tensor_digest(field.base_parameters())


def adapter_digest(field: VelocityField, stage_tag) -> str:
    return tensor_digest(field.adapter_parameters(stage_tag))


# --- checkpoint archive -------------------------------------------------
#
#   magic    b"FTCK"            4 bytes
#   version  uint32 LE          currently 1
#   hlen     uint32 LE          byte length of the JSON header
#   header   UTF-8 JSON         {"net": NetConfig, "seed", "step",
#                                "adapters": [[stage_tag, rank, alpha], ...],
#                                "tensors": [[name, shape], ...]}
#   payload  float32 LE         tensors concatenated in header order:
#                               base tensors (module registration order),
#                               then adapter 0 (A, B per adapted map),
#                               adapter 1, ...

_MAGIC = b"FTCK"
_VERSION = 1


def _ordered_tensors(field):
    names = [n for n, _ in field.base_parameters()]
    params = dict(field.named_parameters())
    for idx in range(len(field.adapter_specs)):
        for layer_name, layer in field.named_modules():
            if isinstance(layer, AdaptedLinear) and len(layer.adapters) > idx:
                prefix = f"{layer_name}.adapters.{idx}"
                names += [f"{prefix}.A", f"{prefix}.B"]
    return [(n, params[n]) for n in names]


def checkpoint_bytes(field: VelocityField) -> bytes:
    tensors = _ordered_tensors(field)
    header = {
        "net": field.cfg.__dict__,
        "seed": field.seed,
        "step": field.step_counter,
        "adapters": [list(s) for s in field.adapter_specs],
        "tensors": [[n, list(p.shape)] for n, p in tensors],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", _VERSION, len(hbytes)))
    buf.write(hbytes)
    for _, p in tensors:
        buf.write(p.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(field: VelocityField, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(field))


def load_checkpoint(path, dtype=torch.float32) -> VelocityField:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != _MAGIC or len(data) < 12:
        raise DataError(f"{path} is not a flowtint checkpoint")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != _VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    field = VelocityField(NetConfig(**header["net"]), seed=header["seed"], dtype=dtype)
    for tag, rank, alpha in header["adapters"]:
        attach_adapter(field, rank, alpha, tag)
    field.step_counter = header["step"]
    params = dict(field.named_parameters())
    offset = 12 + hlen
    with torch.no_grad():
        for name, shape in header["tensors"]:
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
            params[name].copy_(torch.from_numpy(arr.astype(np.float32)).to(dtype))
            offset += 4 * n
    return field
