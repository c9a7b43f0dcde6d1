"""The full network: diagonal reduction, convolution steps, interaction steps and a readout head."""
import logging
from functools import lru_cache
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn as nn

from unite import o3
from unite.basis import ELEMENTS, max_atom_aos
from unite.errors import DomainError
from unite.featurizer import AuxBasisSpec, aux_overlap
from unite.graph import GraphBatch
from unite.layers import (
    AttentionWeights,
    DiagonalReduction,
    EquivariantRep,
    Matching,
    MessagePassing,
    PointwiseInteraction,
    ReverseMatching,
    block_convolution,
)
from unite.pooling import Head, build_head
from unite.settings import HeadSettings, ModelSettings, RunSettings

logger = logging.getLogger(__name__)


def padded_aux_tables(aux: Optional[AuxBasisSpec] = None) -> Dict[int, np.ndarray]:
    """Three-index aux overlaps for every tabulated element, padded to the largest AO count."""
    if aux is None:
        return _default_aux_tables()
    return _pad_aux_tables(aux)


@lru_cache(maxsize=1)
def _default_aux_tables() -> Dict[int, np.ndarray]:
    return _pad_aux_tables(AuxBasisSpec())


def _pad_aux_tables(aux: AuxBasisSpec) -> Dict[int, np.ndarray]:
    n_pad = max_atom_aos()
    tables = {l: np.zeros((len(ELEMENTS), n_pad, n_pad, aux.count(l), 2 * l + 1)) for l in aux.exponents}
    for row, z in enumerate(ELEMENTS):
        for l, table in aux_overlap(z, aux).items():
            n_ao = table.shape[0]
            tables[l][row, :n_ao, :n_ao] = table
    return tables


class ConvolutionStep(nn.Module):
    """One message-passing update: matching, pair convolution, attention, aggregation, reverse matching, interaction."""

    def __init__(self, settings: ModelSettings, n_input_channels: int, cg_table: Optional[o3.CgTable] = None):
        super().__init__()
        channels = settings.channels
        self.matching = Matching(channels, settings.conv_channels)
        self.attention = AttentionWeights(
            channels,
            n_input_channels,
            settings.attention_heads,
            settings.morlet_count,
            settings.morlet_gamma0,
            settings.morlet_ratio,
            settings.hidden,
        )
        self.message_passing = MessagePassing(settings.conv_channels, settings.epsilon)
        self.reverse_matching = ReverseMatching(channels, settings.conv_channels * settings.attention_heads)
        self.interaction = PointwiseInteraction(
            channels, "batch", settings.epsilon, settings.hidden, settings.norm_momentum,
            settings.zero_init_gates, cg_table,
        )

    def messages(self, h: EquivariantRep, batch: GraphBatch, w_in: torch.Tensor) -> torch.Tensor:
        rho = self.matching(h, batch)
        return block_convolution(rho[batch.pair_src], batch.pair_blocks, w_in)

    def forward(self, h: EquivariantRep, batch: GraphBatch, w_in: torch.Tensor) -> EquivariantRep:
        messages = self.messages(h, batch, w_in)
        alpha = self.attention(h, batch)
        aggregated = self.message_passing(messages, alpha, batch)
        g = self.reverse_matching(aggregated, batch)
        return self.interaction(h, g)


class UniteNet(nn.Module):
    """Maps a GraphBatch to final per-atom equivariant representations."""

    def __init__(
        self,
        settings: ModelSettings,
        n_input_channels: int,
        cg_table: Optional[o3.CgTable] = None,
        aux: Optional[AuxBasisSpec] = None,
    ):
        super().__init__()
        self.settings = settings
        self.n_input_channels = n_input_channels
        channels = settings.channels
        self.reduction = DiagonalReduction(channels, n_input_channels, padded_aux_tables(aux))
        self.w_in = nn.Parameter(
            torch.randn(settings.conv_channels, n_input_channels, dtype=torch.float64) / np.sqrt(n_input_channels)
        )
        self.conv_steps = nn.ModuleList(
            ConvolutionStep(settings, n_input_channels, cg_table) for _ in range(settings.conv_steps)
        )
        self.interaction_steps = nn.ModuleList(
            PointwiseInteraction(
                channels, "layer", settings.epsilon, settings.hidden, settings.norm_momentum,
                settings.zero_init_gates, cg_table,
            )
            for _ in range(settings.interaction_steps)
        )

    def forward(self, batch: GraphBatch) -> EquivariantRep:
        if batch.n_channels != self.n_input_channels:
            raise DomainError(f"batch has {batch.n_channels} channels, model expects {self.n_input_channels}")
        h = self.reduction(batch)
        for step in self.conv_steps:
            h = step(h, batch, self.w_in)
        for step in self.interaction_steps:
            h = step(h, h)
        return h


class UniteModel(nn.Module):
    """Backbone plus one readout head; energy predictions add E_TB under delta learning."""

    def __init__(
        self,
        model_settings: ModelSettings,
        head_settings: HeadSettings,
        n_input_channels: int,
        delta_learning: bool = False,
        cg_table: Optional[o3.CgTable] = None,
    ):
        super().__init__()
        self.head_settings = head_settings
        self.delta_learning = delta_learning
        self.net = UniteNet(model_settings, n_input_channels, cg_table)
        self.head: Head = build_head(
            head_settings.kind, model_settings.channels, model_settings.epsilon, head_settings.attention_kind
        )

    def forward(self, batch: GraphBatch) -> torch.Tensor:
        prediction = self.head(self.net(batch), batch)
        if self.delta_learning:
            prediction = prediction + batch.e_tb
        return prediction


def build_model(settings: RunSettings, cg_table: Optional[o3.CgTable] = None) -> UniteModel:
    """Construct a freshly initialized model for a run configuration (uses the current torch RNG)."""
    model = UniteModel(
        settings.model,
        settings.head,
        settings.featurizer.n_channels,
        settings.training.loss.delta_learning,
        cg_table,
    )
    n_params = sum(p.numel() for p in model.parameters())
    logger.info(f"Built {settings.head.kind} model with {n_params} parameters")
    return model
