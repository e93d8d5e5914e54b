"""Initial token embeddings for the six token kinds and the four scale sequences."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .dataset import COCO_EDGES, COCO_KEYPOINTS, Manifest, assign_groups_kmeans
from .features import Batch

COORD_FEATURES = 6  # standardized xy, standardized temporal diff xy, person-normalized xy


def ffn(in_dim: int, d: int) -> nn.Sequential:
    """One hidden layer of width d, ReLU, output width d."""
    return nn.Sequential(nn.Linear(in_dim, d), nn.ReLU(), nn.Linear(d, d))


def skeleton_adjacency(keypoint_names) -> torch.Tensor:
    """Symmetric-normalized adjacency with self-loops, D^-1/2 (A + I) D^-1/2."""
    J = len(keypoint_names)
    A = np.eye(J)
    if list(keypoint_names) == list(COCO_KEYPOINTS):
        for a, b in COCO_EDGES:
            A[a, b] = A[b, a] = 1.0
    d = A.sum(1) ** -0.5
    return torch.as_tensor(d[:, None] * A * d[None, :])


class GraphTypeEmbedding(nn.Module):
    """Learned keypoint-type vectors refined by graph convolutions over the skeleton."""

    def __init__(self, keypoint_names, dim: int, layers: int = 3):
        super().__init__()
        self.base = nn.Parameter(torch.randn(len(keypoint_names), dim))
        self.register_buffer("adj", skeleton_adjacency(keypoint_names).float())
        self.layers = nn.ModuleList(nn.Linear(dim, dim) for _ in range(layers))
        self.act = nn.ReLU()

    def forward(self) -> torch.Tensor:
        h = self.base
        for i, layer in enumerate(self.layers):
            h = self.adj.to(h.dtype) @ layer(h)
            if i < len(self.layers) - 1:
                h = self.act(h)
        return h


class FourierPE(nn.Module):
    """[sin, cos] of learned 2-D frequency projections of normalized image coordinates."""

    def __init__(self, dim: int, sigma: float = 4.0):
        super().__init__()
        self.freqs = nn.Parameter(torch.randn(dim // 2, 2) * sigma)

    def forward(self, xy: torch.Tensor) -> torch.Tensor:
        proj = 2 * math.pi * xy @ self.freqs.T
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)


def scale_lengths(P: int, J: int, E: int, G: int) -> tuple[int, int, int, int]:
    prefix = 1 + E
    return prefix + P * J, prefix + P, prefix + P * (P - 1), prefix + G


def interaction_pairs(P: int) -> list[tuple[int, int]]:
    return [(p, q) for p, q in itertools.product(range(P), repeat=2) if p != q]


def scale_tags(P: int, J: int, E: int, G: int) -> list[list[tuple]]:
    prefix = [("cls",)] + [("object", e) for e in range(E)]
    return [
        prefix + [("keypoint", p, j) for p in range(P) for j in range(J)],
        prefix + [("person", p) for p in range(P)],
        prefix + [("interaction", p, q) for p, q in interaction_pairs(P)],
        prefix + [("group", g) for g in range(G)],
    ]


@dataclass
class ScaleSequences:
    seqs: list[torch.Tensor]   # one (B, n_s, d) tensor per scale
    tags: list[list[tuple]]
    n_prefix: int              # [CLS] plus object tokens
    group_members: torch.Tensor  # (B, G, S) person slots, -1 padded

    def actors(self, s: int) -> torch.Tensor:
        return self.seqs[s][:, self.n_prefix:]

    def lengths(self) -> tuple[int, ...]:
        return tuple(x.shape[1] for x in self.seqs)


def assemble_scales(cls, objects, keypoints, persons, interactions, groups,
                    group_members, J: int) -> ScaleSequences:
    """Prepend the same [CLS] and object tokens to each scale's actor tokens."""
    B, d = cls.shape
    prefix = torch.cat([cls[:, None, :], objects], dim=1)
    seqs = [torch.cat([prefix, actors], dim=1) for actors in (keypoints, persons, interactions, groups)]
    P, E, G = persons.shape[1], objects.shape[1], groups.shape[1]
    return ScaleSequences(seqs, scale_tags(P, J, E, G), 1 + E, group_members)


def gather_members(tokens: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """Gather (B, n, d) tokens by (n_c, m) or (B, n_c, m) indices; -1 yields zeros."""
    B, n, d = tokens.shape
    if index.dim() == 2:
        index = index.unsqueeze(0).expand(B, -1, -1)
    if index.numel() and int(index.max()) >= n:
        raise ValueError(f"member index {int(index.max())} out of range for {n} tokens")
    safe = index.clamp(min=0)
    out = torch.gather(tokens, 1, safe.reshape(B, -1, 1).expand(-1, -1, d))
    out = out.reshape(B, index.shape[1], index.shape[2], d)
    return out * (index >= 0).unsqueeze(-1).to(tokens.dtype)


def kmeans_members(persons: torch.Tensor, person_mask: torch.Tensor, G: int, seed: int = 0) -> torch.Tensor:
    """k-means groups of present persons, labelled in order of each group's lowest slot."""
    B, P, _ = persons.shape
    out = torch.full((B, G, P), -1, dtype=torch.long)
    reprs = persons.detach().cpu().double().numpy()
    mask = person_mask.detach().cpu().numpy() > 0
    for b in range(B):
        slots = np.flatnonzero(mask[b])
        if len(slots) == 0:
            continue
        if len(slots) < G:
            labels = np.arange(len(slots))
        else:
            labels = assign_groups_kmeans(reprs[b, slots], G, seed).mapping
        order = sorted(set(labels.tolist()), key=lambda g: slots[labels == g].min())
        for new, g in enumerate(order):
            members = slots[labels == g]
            out[b, new, : len(members)] = torch.as_tensor(members)
    return out


class Tokenizer(nn.Module):
    """Learned tables and FFNs producing the initial tokens of every kind."""

    def __init__(self, cfg: ModelConfig, manifest: Manifest, T: int):
        super().__init__()
        d = cfg.d
        self.cfg = cfg
        self.P, self.J, self.E, self.G, self.T = (manifest.max_persons, manifest.num_keypoint_types,
                                                  manifest.max_objects, manifest.num_groups, T)
        self.type_embed = GraphTypeEmbedding(manifest.keypoint_names, cfg.d_type, cfg.gcn_layers)
        self.fourier = FourierPE(cfg.d_fourier, cfg.fourier_sigma)
        self.time_pe = nn.Parameter(torch.randn(T, cfg.d_time) * 0.1)
        self.cls = nn.Parameter(torch.randn(d) * 0.1)
        self.composite_width = cfg.d_type + cfg.d_fourier + cfg.d_time + COORD_FEATURES + self.J
        self.keypoint_ffn = ffn(T * self.composite_width, d)
        self.person_ffn = ffn(T * self.J * 2, d)
        self.interaction_ffn = ffn(2 * d, d)
        self.group_size = math.ceil(self.P / 2)
        self.group_ffn = ffn(self.group_size * d, d) if cfg.grouping == "heuristic" else None
        self.object_width = cfg.d_fourier + cfg.d_time + 4
        self.object_ffn = ffn(T * self.object_width, d)
        self.register_buffer("pairs", torch.tensor(interaction_pairs(self.P), dtype=torch.long).reshape(-1, 2))

    def keypoint_composite(self, batch: Batch) -> torch.Tensor:
        """Per-frame keypoint vectors, (B, P, T, J, composite_width)."""
        B, P, T, J, _ = batch.kp_std.shape
        mask = batch.kp_mask.unsqueeze(-1)
        parts = [
            self.type_embed().expand(B, P, T, J, -1),
            self.fourier(batch.kp_img) * mask,
            self.time_pe[None, None, :, None, :].expand(B, P, T, J, -1),
            torch.cat([batch.kp_std, batch.kp_diff, batch.kp_norm], dim=-1) * mask,
            batch.oks[:, :, None, None, :].expand(B, P, T, J, J),
        ]
        return torch.cat(parts, dim=-1) * batch.frame_keep[..., None, None]

    def keypoint_tokens(self, batch: Batch) -> torch.Tensor:
        comp = self.keypoint_composite(batch)
        B, P, T, J, c = comp.shape
        flat = comp.permute(0, 1, 3, 2, 4).reshape(B, P * J, T * c)
        return self.keypoint_ffn(flat)

    def person_tokens(self, batch: Batch) -> torch.Tensor:
        B, P, T, J, _ = batch.kp_std.shape
        x = batch.kp_std * batch.frame_keep[..., None, None]
        return self.person_ffn(x.reshape(B, P, T * J * 2))

    def interaction_tokens(self, persons: torch.Tensor) -> torch.Tensor:
        pairs = gather_members(persons, self.pairs)
        return self.interaction_ffn(pairs.flatten(2))

    def group_tokens(self, persons: torch.Tensor, members: torch.Tensor) -> torch.Tensor:
        gathered = gather_members(persons, members)
        if self.group_ffn is None:
            return gathered.sum(2)
        return self.group_ffn(gathered.flatten(2))

    def object_tokens(self, batch: Batch) -> torch.Tensor:
        B, E, T, _ = batch.obj_std.shape
        if E == 0:
            return batch.obj_std.new_zeros(B, 0, self.cfg.d)
        mask = batch.obj_mask.unsqueeze(-1)
        parts = [
            self.fourier(batch.obj_img) * mask,
            self.time_pe[None, None].expand(B, E, T, -1),
            torch.cat([batch.obj_std, batch.obj_diff], dim=-1) * mask,
        ]
        return self.object_ffn(torch.cat(parts, dim=-1).reshape(B, E, -1))

    def group_members(self, batch: Batch, persons: torch.Tensor) -> torch.Tensor:
        if self.cfg.grouping == "kmeans":
            return kmeans_members(persons, batch.person_mask, self.G)
        return batch.group_members

    def forward(self, batch: Batch) -> ScaleSequences:
        B = len(batch)
        persons = self.person_tokens(batch)
        members = self.group_members(batch, persons)
        return assemble_scales(
            self.cls.expand(B, -1), self.object_tokens(batch), self.keypoint_tokens(batch),
            persons, self.interaction_tokens(persons), self.group_tokens(persons, members),
            members, self.J)
