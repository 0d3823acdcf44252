"""Full tracker: encoder, box head, prototypes and optional adapter blocks."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import torch
from torch import nn

from .boxhead import Prototypes, RegressionHead, scenario_tokens, target_score_map
from .encoder import ADAPTER_SITES, Encoder, EncoderConfig, EmbeddingSet, semantic_token
from .numerics import DTYPE
from .rama import AdapterBlock


@dataclass
class ModelConfig(EncoderConfig):
    rank: int = 8
    adapter_layers: str = "all"       # "deep", or "all" vision-carrying layers
    beta: float = 0.75
    tau: float = 0.07
    inclusive_split: bool = False

    # numeric fields written into checkpoints, in this order
    META_FIELDS = ("dim", "heads", "shallow_layers", "deep_layers", "patch", "template_size",
                   "search_size", "max_text", "vocab", "in_chans", "mlp_ratio", "rank")

    def meta_vector(self) -> torch.Tensor:
        return torch.tensor([float(getattr(self, f)) for f in self.META_FIELDS], dtype=DTYPE)

    @classmethod
    def from_meta(cls, vec: torch.Tensor, **extra) -> "ModelConfig":
        vals = {f: int(v) for f, v in zip(cls.META_FIELDS, vec.tolist())}
        return cls(**vals, **extra)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**{f.name: getattr(self, f.name) for f in fields(EncoderConfig)})


class Tracker(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder_config())
        self.head = RegressionHead(cfg.dim)
        self.prototypes = Prototypes(cfg.dim)
        self.adapters: Optional[nn.ModuleDict] = None

    # --- adapters -----------------------------------------------------------

    def attach_adapters(self, seed: int = 0) -> list:
        """Enable the aux patch embedding and inject one adapter per adapted projection."""
        self.encoder.enable_aux()
        if self.adapters is not None:
            return self.adapter_blocks()
        gen = torch.Generator().manual_seed(seed)
        groups = {}
        k = 0
        for i, kind, layer in self.encoder.layers():
            # language-only layers never see auxiliary rows
            if kind == "shallow_lang" or (self.cfg.adapter_layers == "deep" and kind != "deep"):
                continue
            sites = {}
            for site in ADAPTER_SITES:
                lin = getattr(layer, site)
                sites[site] = AdapterBlock(lin.in_features, lin.out_features, self.cfg.rank, k, f"{kind}.{i}.{site}",
                                           lin.weight.detach().T.clone(), lin.bias.detach().clone(), gen)
                k += 1
            groups[f"{kind}_{i}"] = nn.ModuleDict(sites)
        self.adapters = nn.ModuleDict(groups)
        return self.adapter_blocks()

    def adapter_blocks(self) -> list:
        if self.adapters is None:
            return []
        return [blk for group in self.adapters.values() for blk in group.values()]

    def stage1_parameters(self):
        """Named parameters that belong to the first training stage."""
        for name, p in self.named_parameters():
            if name.startswith("adapters.") or name.startswith("encoder.aux_patch_embed."):
                continue
            yield name, p

    # --- forward pieces -----------------------------------------------------

    def encode(self, reference, token_ids, template, search, aux_template=None, aux_search=None,
               modality=None, use_adapters: bool = True) -> EmbeddingSet:
        adapters = self.adapters if (use_adapters and self.adapters is not None) else None
        return self.encoder(reference, token_ids, template, search, aux_template, aux_search, modality, adapters)

    def semantic(self, emb: EmbeddingSet, reference, layer: int = -1) -> torch.Tensor:
        refs = reference if isinstance(reference, (list, tuple)) else [reference] * emb.joint.shape[0]
        return semantic_token(emb.semantic_l(layer), emb.semantic_v(layer), list(refs))

    def score(self, E_x: torch.Tensor, T: torch.Tensor, tokens):
        """Target map and regression maps for (B, N_x, C) search embeddings."""
        L_hat = target_score_map(E_x, T, self.prototypes, tokens, self.cfg.tau)
        C_hat, O_hat, S_hat = self.head(E_x)
        return L_hat, C_hat, O_hat, S_hat

    def mine_tokens(self, T, E_t, in_box, valid):
        return scenario_tokens(T, E_t, in_box, self.cfg.beta, valid, self.cfg.inclusive_split)
