"""Transformer encoder and the four-scale block wiring."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .config import ModelConfig
from .dataset import Manifest
from .features import Batch
from .tokens import ScaleSequences, Tokenizer, ffn, gather_members, interaction_pairs, kmeans_members

LN_EPS = 1e-12


def scaled_dot_attention(Q: torch.Tensor, K: torch.Tensor, V: torch.Tensor):
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes; returns (output, weights)."""
    weights = torch.softmax(Q @ K.transpose(-2, -1) / math.sqrt(Q.shape[-1]), dim=-1)
    return weights @ V, weights


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"d={d} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor):
        B, n, d = x.shape
        q, k, v = self.qkv(x).reshape(B, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        y, weights = scaled_dot_attention(q, k, v)
        return self.out(y.transpose(1, 2).reshape(B, n, d)), weights


class EncoderLayer(nn.Module):
    """MSA, Add & Dropout & LN, MLP, Add & Dropout & LN."""

    def __init__(self, d: int, heads: int, d_mlp: int, dropout: float):
        super().__init__()
        self.msa = MultiHeadSelfAttention(d, heads)
        self.mlp = nn.Sequential(nn.Linear(d, d_mlp), nn.ReLU(), nn.Linear(d_mlp, d))
        self.ln1 = nn.LayerNorm(d, eps=LN_EPS)
        self.ln2 = nn.LayerNorm(d, eps=LN_EPS)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor):
        a, weights = self.msa(x)
        x = self.ln1(x + self.drop(a))
        x = self.ln2(x + self.drop(self.mlp(x)))
        return x, weights


def aggregate_and_skip(refined: torch.Tensor, initial: torch.Tensor, members: torch.Tensor,
                       agg: nn.Module | None) -> torch.Tensor:
    """Coarser actor inputs: aggregate of mapped refined finer tokens plus the initial coarser tokens.

    ``members`` indexes finer tokens per coarser token ((n_c, m) or (B, n_c, m),
    -1 for padding). ``agg`` None selects summation.
    """
    n_coarse = members.shape[-2]
    if initial.shape[1] != n_coarse:
        raise ValueError(f"{n_coarse} aggregated tokens but {initial.shape[1]} initial tokens")
    gathered = gather_members(refined, members)
    aggregate = gathered.sum(2) if agg is None else agg(gathered.flatten(2))
    return aggregate + initial


def check_member_tags(fine_tags, coarse_tags, members: torch.Tensor) -> None:
    """Each coarser actor token must map onto finer tokens of the matching kind and identity."""
    fine_kind = {"person": "keypoint", "interaction": "person", "group": "person"}
    for c, tag in enumerate(coarse_tags):
        want = fine_kind[tag[0]]
        for m in members[c].tolist():
            if m < 0:
                continue
            ftag = fine_tags[m]
            if ftag[0] != want:
                raise ValueError(f"{tag} aggregates {ftag}, expected {want} tokens")
            if tag[0] == "person" and ftag[1] != tag[1]:
                raise ValueError(f"{tag} aggregates {ftag}")
            if tag[0] == "interaction" and ftag[1] not in tag[1:]:
                raise ValueError(f"{tag} aggregates {ftag}")


@dataclass
class BlockOutput:
    sequences: ScaleSequences
    cls: list[torch.Tensor]        # per active scale, (B, d)
    attention: list[torch.Tensor]  # per active scale, (B, h, n, n)


class MultiscaleBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, P: int, J: int, seed: int = 0):
        super().__init__()
        d = cfg.d
        self.cfg = cfg
        self.P, self.J = P, J
        self.num_scales = cfg.num_scales
        self.encoders = nn.ModuleList(
            EncoderLayer(d, cfg.heads[s], cfg.d_mlp, cfg.dropout[s]) for s in range(cfg.num_scales))
        self.to_person = ffn(J * d, d) if cfg.num_scales >= 2 else None
        self.to_interaction = ffn(2 * d, d) if cfg.num_scales >= 3 else None
        self.to_group = (ffn(math.ceil(P / 2) * d, d)
                         if cfg.num_scales >= 4 and cfg.grouping == "heuristic" else None)
        self.seed = seed
        self.register_buffer("person_index", torch.arange(P * J).reshape(P, J), persistent=False)
        self.register_buffer("pair_index", torch.tensor(interaction_pairs(P), dtype=torch.long).reshape(-1, 2),
                             persistent=False)
        self._tags_checked = False

    def check_tags(self, inputs: ScaleSequences) -> None:
        n0 = inputs.n_prefix
        actor_tags = [t[n0:] for t in inputs.tags]
        if self.num_scales >= 2:
            check_member_tags(actor_tags[0], actor_tags[1], self.person_index)
        if self.num_scales >= 3:
            check_member_tags(actor_tags[1], actor_tags[2], self.pair_index)
        self._tags_checked = True

    def coarser_inputs(self, s: int, inputs: ScaleSequences, outs: list[torch.Tensor],
                       person_mask: torch.Tensor | None):
        n0 = inputs.n_prefix
        members = inputs.group_members
        if s == 1:
            x = aggregate_and_skip(outs[0][:, n0:], inputs.actors(1), self.person_index, self.to_person)
        elif s == 2:
            x = aggregate_and_skip(outs[1][:, n0:], inputs.actors(2), self.pair_index, self.to_interaction)
        else:
            persons = outs[1][:, n0:]
            if self.cfg.grouping == "kmeans":
                members = kmeans_members(persons, person_mask, inputs.actors(3).shape[1], self.seed)
            x = aggregate_and_skip(persons, inputs.actors(3), members, self.to_group)
        # [CLS] and object tokens carry over from the finer scale's encoder output
        return torch.cat([outs[s - 1][:, :n0], x], dim=1), members

    def forward(self, inputs: ScaleSequences, person_mask: torch.Tensor | None = None) -> BlockOutput:
        if not self._tags_checked:
            self.check_tags(inputs)
        outs, cls, attention = [], [], []
        members = inputs.group_members
        x = inputs.seqs[0]
        for s in range(self.num_scales):
            if s > 0:
                x, m = self.coarser_inputs(s, inputs, outs, person_mask)
                if s == 3:
                    members = m
            y, w = self.encoders[s](x)
            outs.append(y)
            cls.append(y[:, 0])
            attention.append(w)
        seqs = outs + inputs.seqs[self.num_scales:]
        return BlockOutput(ScaleSequences(seqs, inputs.tags, inputs.n_prefix, members), cls, attention)


@dataclass
class ForwardOutput:
    cls: list[list[torch.Tensor]]           # [block][scale] -> (B, d)
    persons: torch.Tensor                    # (B, P, d) final person tokens
    group_logits: list[list[torch.Tensor]]  # [block][scale] -> (B, classes)
    person_logits: torch.Tensor | None      # (B, P, actions)
    attention: list[list[torch.Tensor]] = field(default_factory=list)
    tags: list[list[tuple]] = field(default_factory=list)

    @property
    def clip_reprs(self) -> list[torch.Tensor]:
        """Per-scale [CLS] outputs of the last block."""
        return self.cls[-1] if self.cls else []

    @property
    def final_logits(self) -> torch.Tensor:
        return self.group_logits[-1][-1]


class Composer(nn.Module):
    """Tokenizer, stacked multiscale blocks, shared classifier heads and prototypes."""

    def __init__(self, cfg: ModelConfig, manifest: Manifest, T: int, K: int = 32):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = Tokenizer(cfg, manifest, T)
        P, J, E = manifest.max_persons, manifest.num_keypoint_types, manifest.max_objects
        d = cfg.d
        if cfg.multiscale:
            self.blocks = nn.ModuleList(MultiscaleBlock(cfg, P, J) for _ in range(cfg.blocks))
            self.group_head = nn.Linear(d, manifest.num_classes)
        else:
            self.blocks = nn.ModuleList()
            self.to_person = ffn(J * d, d)
            self.group_head = nn.Linear((E + P) * d, manifest.num_classes)
        self.person_head = nn.Linear(d, manifest.num_actions)
        self.prototypes = nn.Parameter(nn.functional.normalize(torch.randn(K, d), dim=1))

    def group_logits(self, clip_repr: torch.Tensor) -> torch.Tensor:
        return self.group_head(clip_repr)

    def person_logits(self, person_repr: torch.Tensor) -> torch.Tensor:
        return self.person_head(person_repr)

    @torch.no_grad()
    def normalize_prototypes(self) -> None:
        self.prototypes.copy_(nn.functional.normalize(self.prototypes, dim=1))

    def forward(self, batch: Batch) -> ForwardOutput:
        seq = self.tokenizer(batch)
        if not self.cfg.multiscale:
            return self._forward_flat(seq)
        cls, logits, attention = [], [], []
        for block in self.blocks:
            out = block(seq, batch.person_mask)
            seq = out.sequences
            cls.append(out.cls)
            logits.append([self.group_logits(c) for c in out.cls])
            attention.append(out.attention)
        persons = seq.actors(1)
        person_logits = self.person_logits(persons) if self.cfg.num_scales >= 2 else None
        return ForwardOutput(cls, persons, logits, person_logits, attention, seq.tags)

    def _forward_flat(self, seq: ScaleSequences) -> ForwardOutput:
        # no relational reasoning: persons straight from initial keypoint tokens
        n0 = seq.n_prefix
        keypoints = seq.actors(0)
        B = keypoints.shape[0]
        persons = self.to_person(keypoints.reshape(B, -1, self.tokenizer.J * self.cfg.d))
        flat = torch.cat([seq.seqs[0][:, 1:n0], persons], dim=1).reshape(B, -1)
        return ForwardOutput([], persons, [[self.group_logits(flat)]], self.person_logits(persons),
                             [], seq.tags)
