"""Reference-generalized feature extractor.

Joint token layout, in order::

    [T_l | E_l (N_l) | T_v | E_z (N_z) | E_az (N_z) | E_x (N_x) | E_ax (N_x)]

The two aux ranges are only laid out when an auxiliary stream is supplied;
an RGB-only sequence simply omits them, which is equivalent to carrying
them zero-filled and masked.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import torch
from torch import nn

from .numerics import DTYPE, ShapeError, keep_mask_to_additive, layer_norm, masked_softmax


class ReferenceModality(str, Enum):
    BBOX = "bbox"
    NL = "nl"
    NL_BBOX = "nl+bbox"

    @property
    def has_language(self) -> bool:
        return self is not ReferenceModality.BBOX

    @property
    def has_template(self) -> bool:
        return self is not ReferenceModality.NL


class VideoModality(str, Enum):
    RGB = "rgb"
    DEPTH = "depth"
    THERMAL = "thermal"
    EVENT = "event"

    @property
    def index(self) -> int:
        return MODALITY_ORDER.index(self)


MODALITY_ORDER = (VideoModality.RGB, VideoModality.DEPTH, VideoModality.THERMAL, VideoModality.EVENT)
AUX_MODALITIES = MODALITY_ORDER[1:]

RANGE_NAMES = ("lang_token", "lang", "vis_token", "template", "aux_template", "search", "aux_search")
LANG_RANGES = ("lang_token", "lang")


class LayoutError(ValueError):
    pass


@dataclass
class EncoderConfig:
    dim: int = 16
    heads: int = 2
    shallow_layers: int = 2
    deep_layers: int = 2
    patch: int = 4
    template_size: int = 16
    search_size: int = 32
    max_text: int = 8
    vocab: int = 64
    in_chans: int = 3
    mlp_ratio: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        for size in (self.template_size, self.search_size):
            if size % self.patch:
                raise ValueError(f"image size {size} not divisible by patch {self.patch}")

    @property
    def n_z(self) -> int:
        return (self.template_size // self.patch) ** 2

    @property
    def n_x(self) -> int:
        return (self.search_size // self.patch) ** 2

    @property
    def grid(self) -> int:
        return self.search_size // self.patch

    @property
    def num_layers(self) -> int:
        return self.shallow_layers + self.deep_layers


@dataclass
class TokenLayout:
    """Index ranges of the joint sequence plus per-range availability."""

    n_lang: int
    n_z: int
    n_x: int
    with_aux: bool = True
    available: dict = field(default_factory=dict)
    n_words: int = 0

    def __post_init__(self):
        for name in RANGE_NAMES:
            self.available.setdefault(name, False)
        if not self.with_aux:
            self.available["aux_template"] = False
            self.available["aux_search"] = False

    @classmethod
    def for_reference(cls, reference: ReferenceModality, n_lang: int, n_z: int, n_x: int,
                      n_words: int = 0, with_aux: bool = False) -> "TokenLayout":
        reference = ReferenceModality(reference)
        lang = reference.has_language and n_words > 0
        tmpl = reference.has_template
        avail = {
            "lang_token": lang,
            "lang": lang,
            "vis_token": True,
            "template": tmpl,
            "aux_template": with_aux and tmpl,
            "search": True,
            "aux_search": with_aux,
        }
        return cls(n_lang, n_z, n_x, with_aux, avail, n_words if lang else 0)

    def lengths(self) -> dict:
        aux = 1 if self.with_aux else 0
        return {
            "lang_token": 1, "lang": self.n_lang, "vis_token": 1,
            "template": self.n_z, "aux_template": aux * self.n_z,
            "search": self.n_x, "aux_search": aux * self.n_x,
        }

    @property
    def slices(self) -> dict:
        out, start = {}, 0
        for name, n in self.lengths().items():
            out[name] = slice(start, start + n)
            start += n
        return out

    @property
    def size(self) -> int:
        return sum(self.lengths().values())

    def token_keep(self) -> torch.Tensor:
        keep = torch.zeros(self.size, dtype=torch.bool)
        for name, sl in self.slices.items():
            if self.available[name]:
                keep[sl] = True
        # pad positions of the language range are unavailable
        if self.available["lang"]:
            sl = self.slices["lang"]
            keep[sl.start + self.n_words:sl.stop] = False
        return keep

    def lang_group(self) -> torch.Tensor:
        group = torch.zeros(self.size, dtype=torch.bool)
        for name in LANG_RANGES:
            group[self.slices[name]] = True
        return group


def check_layout(reference: ReferenceModality, layout: TokenLayout) -> None:
    reference = ReferenceModality(reference)
    av = layout.available
    if reference is ReferenceModality.NL and av["template"]:
        raise LayoutError("NL reference with an available template")
    if reference is ReferenceModality.BBOX and (av["lang"] or av["lang_token"]):
        raise LayoutError("BBOX reference with available language")
    if reference.has_template and not av["template"]:
        raise LayoutError(f"{reference.value} reference without a template")
    if reference.has_language and not av["lang"]:
        raise LayoutError(f"{reference.value} reference without language")


def _pair_keep(keep: torch.Tensor, lang: torch.Tensor, layer_kind: str) -> torch.Tensor:
    """keep: (..., n) bool; lang: (n,) bool -> (..., n, n) bool allowed interactions."""
    if layer_kind == "deep":
        rows = keep
    elif layer_kind == "shallow_lang":
        rows = keep & lang
    elif layer_kind == "shallow_vision":
        rows = keep & ~lang
    else:
        raise ValueError(f"unknown layer kind {layer_kind!r}")
    return rows.unsqueeze(-1) & rows.unsqueeze(-2)


def build_attention_mask(reference: ReferenceModality, layout: TokenLayout, layer_kind: str) -> torch.Tensor:
    """Additive task-oriented attention mask for one sequence."""
    check_layout(reference, layout)
    return keep_mask_to_additive(_pair_keep(layout.token_keep(), layout.lang_group(), layer_kind))


def semantic_token(T_l: torch.Tensor, T_v: torch.Tensor, reference) -> torch.Tensor:
    """Pick the semantic token for the reference (batched when ``reference`` is a list)."""
    if isinstance(reference, (list, tuple)):
        w_l = torch.tensor([_lang_weight(r) for r in reference], dtype=DTYPE).unsqueeze(-1)
        return w_l * T_l + (1 - w_l) * T_v
    w = _lang_weight(reference)
    if w == 1.0:
        return T_l
    if w == 0.0:
        return T_v
    return (T_l + T_v) / 2


def _lang_weight(reference) -> float:
    reference = ReferenceModality(reference)
    return {ReferenceModality.NL: 1.0, ReferenceModality.BBOX: 0.0, ReferenceModality.NL_BBOX: 0.5}[reference]


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


def _linear(d_in: int, d_out: int) -> nn.Linear:
    lin = nn.Linear(d_in, d_out, dtype=DTYPE)
    nn.init.xavier_uniform_(lin.weight)
    nn.init.zeros_(lin.bias)
    return lin


ADAPTER_SITES = ("q", "k", "v", "fc1")


class EncoderLayer(nn.Module):
    """Pre-norm transformer layer with an additive attention mask.

    Rows whose mask row is entirely NEG_INF are unavailable tokens and pass
    through unchanged.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, eps: float = 1e-5):
        super().__init__()
        self.dim, self.heads = dim, heads
        self.norm1 = LayerNorm(dim, eps)
        self.q = _linear(dim, dim)
        self.k = _linear(dim, dim)
        self.v = _linear(dim, dim)
        self.proj = _linear(dim, dim)
        self.norm2 = LayerNorm(dim, eps)
        self.fc1 = _linear(dim, dim * mlp_ratio)
        self.fc2 = _linear(dim * mlp_ratio, dim)

    def _project(self, site, h, adapters, fusion):
        out = getattr(self, site)(h)
        if adapters is not None and site in adapters:
            out = out + adapters[site].delta(h, fusion)
        return out

    def forward(self, x: torch.Tensor, mask: torch.Tensor, adapters=None, fusion=None) -> torch.Tensor:
        if x.dim() == 2:
            return self.forward(x.unsqueeze(0), mask, adapters, fusion).squeeze(0)
        b, n, c = x.shape
        if mask.shape[-2:] != (n, n):
            raise ShapeError(f"mask {tuple(mask.shape)} does not match sequence length {n}")
        if mask.dim() == 2:
            mask = mask.unsqueeze(0)
        live = (mask == 0).any(-1, keepdim=True).to(DTYPE)
        d = c // self.heads

        h = self.norm1(x)
        q = self._project("q", h, adapters, fusion).view(b, n, self.heads, d).transpose(1, 2)
        k = self._project("k", h, adapters, fusion).view(b, n, self.heads, d).transpose(1, 2)
        v = self._project("v", h, adapters, fusion).view(b, n, self.heads, d).transpose(1, 2)
        attn = masked_softmax(q @ k.transpose(-1, -2) / math.sqrt(d), mask.unsqueeze(1))
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        x = x + live * self.proj(out)

        h = self.norm2(x)
        h = nn.functional.gelu(self._project("fc1", h, adapters, fusion))
        return x + live * self.fc2(h)


@dataclass
class EmbeddingSet:
    """Encoder output: final joint sequence, per-layer states and layout."""

    joint: torch.Tensor
    layout: TokenLayout
    keep: torch.Tensor
    hidden: list

    def range(self, name: str, layer: int = -1) -> torch.Tensor:
        return self.hidden[layer][:, self.layout.slices[name]]

    def search(self, layer: int = -1) -> torch.Tensor:
        return self.range("search", layer)

    def template(self, layer: int = -1) -> torch.Tensor:
        return self.range("template", layer)

    def semantic_l(self, layer: int = -1) -> torch.Tensor:
        return self.hidden[layer][:, self.layout.slices["lang_token"].start]

    def semantic_v(self, layer: int = -1) -> torch.Tensor:
        return self.hidden[layer][:, self.layout.slices["vis_token"].start]


@dataclass
class FusionContext:
    """Row bookkeeping that adapter blocks need to fuse aux tokens into RGB rows."""

    main_rows: torch.Tensor     # (B, n, 1) rows that take the RGB low-rank term
    src: torch.Tensor           # aux row positions
    dst: torch.Tensor           # paired RGB row positions
    mod_idx: torch.Tensor       # (B,) aux modality index into MODALITY_ORDER


def _as_list(value, n):
    if isinstance(value, (list, tuple)):
        if len(value) != n:
            raise ShapeError(f"expected {n} entries, got {len(value)}")
        return list(value)
    return [value] * n


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.dim
        patch_dim = cfg.patch * cfg.patch * cfg.in_chans
        self.lang_embed = nn.Parameter(torch.randn(cfg.vocab, c, dtype=DTYPE) * 0.5)
        self.lang_pos = nn.Parameter(torch.randn(cfg.max_text, c, dtype=DTYPE) * 0.02)
        self.patch_embed = _linear(patch_dim, c)
        self.aux_patch_embed: Optional[nn.Linear] = None
        self.template_pos = nn.Parameter(torch.randn(cfg.n_z, c, dtype=DTYPE) * 0.02)
        self.search_pos = nn.Parameter(torch.randn(cfg.n_x, c, dtype=DTYPE) * 0.02)
        self.lang_token = nn.Parameter(torch.randn(c, dtype=DTYPE) * 0.02)
        self.vis_token = nn.Parameter(torch.randn(c, dtype=DTYPE) * 0.02)
        mk = lambda: EncoderLayer(c, cfg.heads, cfg.mlp_ratio, cfg.ln_eps)
        self.shallow_lang = nn.ModuleList([mk() for _ in range(cfg.shallow_layers)])
        self.shallow_vision = nn.ModuleList([mk() for _ in range(cfg.shallow_layers)])
        self.deep = nn.ModuleList([mk() for _ in range(cfg.deep_layers)])

    def enable_aux(self) -> nn.Linear:
        """Create the trainable aux patch embedding, initialized from the RGB one."""
        if self.aux_patch_embed is None:
            self.aux_patch_embed = _linear(self.patch_embed.in_features, self.cfg.dim)
            with torch.no_grad():
                self.aux_patch_embed.weight.copy_(self.patch_embed.weight)
                self.aux_patch_embed.bias.copy_(self.patch_embed.bias)
        return self.aux_patch_embed

    def layers(self):
        """Yield (global layer index, kind, layer) in execution order."""
        i = 0
        for lang, vis in zip(self.shallow_lang, self.shallow_vision):
            yield i, "shallow_lang", lang
            yield i, "shallow_vision", vis
            i += 1
        for layer in self.deep:
            yield i, "deep", layer
            i += 1

    # --- embeddings -------------------------------------------------------

    def embed_language(self, token_ids) -> tuple[torch.Tensor, torch.Tensor]:
        """Token ids (B, <=N_l) with 0 as pad -> (embeddings (B, N_l, C), valid (B, N_l))."""
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.dim() == 1:
            emb, valid = self.embed_language(ids.unsqueeze(0))
            return emb[0], valid[0]
        b, n = ids.shape
        if n > self.cfg.max_text:
            raise ShapeError(f"{n} tokens exceed max_text={self.cfg.max_text}")
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.cfg.vocab):
            raise IndexError("language token id out of range")
        full = torch.zeros(b, self.cfg.max_text, dtype=torch.long)
        full[:, :n] = ids
        valid = full != 0
        emb = (self.lang_embed[full] + self.lang_pos) * valid.unsqueeze(-1)
        return emb, valid

    def patchify_embed(self, frame: torch.Tensor, image_type: str, modality=VideoModality.RGB) -> torch.Tensor:
        """(B, H, W, ch) frame -> (B, n_patches, C) row-major patch embeddings."""
        frame = torch.as_tensor(frame, dtype=DTYPE)
        if frame.dim() == 3:
            return self.patchify_embed(frame.unsqueeze(0), image_type, modality)[0]
        p = self.cfg.patch
        b, hgt, wid, ch = frame.shape
        if hgt % p or wid % p:
            raise ShapeError(f"frame {hgt}x{wid} not divisible by patch {p}")
        patches = frame.reshape(b, hgt // p, p, wid // p, p, ch).permute(0, 1, 3, 2, 4, 5)
        patches = patches.reshape(b, (hgt // p) * (wid // p), p * p * ch)
        if VideoModality(modality) is VideoModality.RGB:
            proj = self.patch_embed
        else:
            if self.aux_patch_embed is None:
                raise RuntimeError("aux patch embedding not enabled")
            proj = self.aux_patch_embed
        pos = {"template": self.template_pos, "search": self.search_pos}[image_type]
        if pos.shape[0] != patches.shape[1]:
            raise ShapeError(f"{image_type} has {patches.shape[1]} patches, expected {pos.shape[0]}")
        return proj(patches) + pos

    # --- forward ----------------------------------------------------------

    def build_inputs(self, reference, token_ids, template, search, aux_template=None, aux_search=None,
                     modality=None):
        """Assemble the zero-filled joint sequence, its layout and per-token availability."""
        search = torch.as_tensor(search, dtype=DTYPE)
        b = search.shape[0]
        refs = [ReferenceModality(r) for r in _as_list(reference, b)]
        cfg = self.cfg
        with_aux = aux_search is not None

        if token_ids is None:
            token_ids = torch.zeros(b, cfg.max_text, dtype=torch.long)
        lang, valid = self.embed_language(token_ids)
        lang_on = torch.tensor([r.has_language for r in refs])
        valid = valid & lang_on.unsqueeze(-1)
        tmpl_on = torch.tensor([r.has_template for r in refs])
        if template is None:
            if bool(tmpl_on.any()):
                raise LayoutError("template required for BBOX / NL+BBOX references")
            template = torch.zeros(b, cfg.template_size, cfg.template_size, cfg.in_chans, dtype=DTYPE)
        z = self.patchify_embed(template, "template")
        x = self.patchify_embed(search, "search")

        tl = self.lang_token.expand(b, 1, -1)
        tv = self.vis_token.expand(b, 1, -1)
        parts = [tl, lang, tv, z]
        if with_aux:
            mods = [VideoModality(m) for m in _as_list(modality, b)]
            if any(m is VideoModality.RGB for m in mods):
                raise ValueError("aux stream supplied with modality RGB")
            if aux_template is None:
                raise LayoutError("aux search supplied without aux template")
            parts += [self.patchify_embed(aux_template, "template", mods[0]), x,
                      self.patchify_embed(aux_search, "search", mods[0])]
        else:
            parts += [x]
        seq = torch.cat(parts, dim=1)

        layout = TokenLayout(cfg.max_text, cfg.n_z, cfg.n_x, with_aux)
        sl = layout.slices
        keep = torch.zeros(b, layout.size, dtype=torch.bool)
        has_words = valid.any(-1)
        keep[:, sl["lang_token"]] = has_words.unsqueeze(-1)
        keep[:, sl["lang"]] = valid
        keep[:, sl["vis_token"]] = True
        keep[:, sl["template"]] = tmpl_on.unsqueeze(-1)
        keep[:, sl["search"]] = True
        if with_aux:
            keep[:, sl["aux_template"]] = tmpl_on.unsqueeze(-1)
            keep[:, sl["aux_search"]] = True
        for i, r in enumerate(refs):
            if r.has_language and not bool(has_words[i]):
                raise LayoutError(f"{r.value} reference without language tokens")
        seq = seq * keep.unsqueeze(-1)
        return seq, layout, keep, refs

    def _fusion(self, layout: TokenLayout, b: int, modality) -> FusionContext:
        sl = layout.slices
        main = torch.ones(b, layout.size, 1, dtype=DTYPE)
        if not layout.with_aux:
            empty = torch.zeros(0, dtype=torch.long)
            return FusionContext(main, empty, empty, torch.zeros(b, dtype=torch.long))
        main[:, sl["aux_template"]] = 0
        main[:, sl["aux_search"]] = 0
        ar = lambda s: torch.arange(s.start, s.stop)
        src = torch.cat([ar(sl["aux_template"]), ar(sl["aux_search"])])
        dst = torch.cat([ar(sl["template"]), ar(sl["search"])])
        mods = torch.tensor([VideoModality(m).index for m in _as_list(modality, b)])
        return FusionContext(main, src, dst, mods)

    def forward(self, reference, token_ids, template, search, aux_template=None, aux_search=None,
                modality=None, adapters=None) -> EmbeddingSet:
        seq, layout, keep, refs = self.build_inputs(reference, token_ids, template, search,
                                                    aux_template, aux_search, modality)
        fusion = self._fusion(layout, seq.shape[0], modality) if adapters is not None else None
        lang = layout.lang_group()
        masks = {kind: keep_mask_to_additive(_pair_keep(keep, lang, kind))
                 for kind in ("shallow_lang", "shallow_vision", "deep")}
        hidden = []
        x = seq
        for i, kind, layer in self.layers():
            key = f"{kind}_{i}"
            ad = adapters[key] if adapters is not None and key in adapters else None
            x = layer(x, masks[kind], ad, fusion)
            if kind != "shallow_lang":
                hidden.append(x)
        return EmbeddingSet(x, layout, keep, hidden)

    extract_features = forward

    @torch.no_grad()
    def forward_pruned(self, reference, token_ids, template, search) -> torch.Tensor:
        """Single-sample efficient inference: drop unavailable tokens and run
        unmasked attention. Returns a full-length (n, C) tensor with zeros at
        dropped positions so it lines up with ``forward``."""
        seq, layout, keep, _ = self.build_inputs(reference, token_ids, template, search)
        seq, keep = seq[0], keep[0]
        lang = layout.lang_group()
        idx_l = torch.nonzero(keep & lang).flatten()
        idx_v = torch.nonzero(keep & ~lang).flatten()
        xl, xv = seq[idx_l], seq[idx_v]
        no_mask = lambda n: torch.zeros(n, n, dtype=DTYPE)
        for lang_layer, vis_layer in zip(self.shallow_lang, self.shallow_vision):
            if len(idx_l):
                xl = lang_layer(xl, no_mask(len(idx_l)))
            xv = vis_layer(xv, no_mask(len(idx_v)))
        idx = torch.cat([idx_l, idx_v])
        x = torch.cat([xl, xv])
        for layer in self.deep:
            x = layer(x, no_mask(len(idx)))
        out = torch.zeros_like(seq)
        out[idx] = x
        return out
