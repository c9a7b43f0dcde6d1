"""Equivariant building blocks of the network.

Representations are dicts keyed by (l, p) holding tensors of shape
(atoms, N_lp, 2l+1). AO-space vectors are padded to ``max_atom_aos()`` and
mapped to and from the per-degree shell features through the gather maps
carried by :class:`unite.graph.GraphBatch`.
"""
import logging
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from unite import o3
from unite.basis import AO_L_MAX, check_permutation, max_shells_per_degree
from unite.errors import StatisticsError
from unite.graph import GraphBatch

logger = logging.getLogger(__name__)

IrrepKey = Tuple[int, int]
VARIANCE_FLOOR = 1e-5


class EquivariantRep:
    """Per-atom features grouped by irrep (l, p)."""

    def __init__(self, blocks: Dict[IrrepKey, torch.Tensor]):
        self.blocks = dict(blocks)

    @classmethod
    def zeros(cls, channels: Dict[IrrepKey, int], n_atoms: int) -> "EquivariantRep":
        return cls({(l, p): torch.zeros(n_atoms, n, 2 * l + 1, dtype=torch.float64) for (l, p), n in channels.items()})

    def __getitem__(self, key: IrrepKey) -> torch.Tensor:
        return self.blocks[key]

    def __contains__(self, key: IrrepKey) -> bool:
        return key in self.blocks

    def keys(self) -> List[IrrepKey]:
        return list(self.blocks)

    def items(self) -> Iterator[Tuple[IrrepKey, torch.Tensor]]:
        return iter(self.blocks.items())

    def __add__(self, other: "EquivariantRep") -> "EquivariantRep":
        return EquivariantRep({k: v + other.blocks[k] for k, v in self.blocks.items()})

    @property
    def n_atoms(self) -> int:
        return int(next(iter(self.blocks.values())).shape[0])

    def norms(self, eps: float) -> torch.Tensor:
        """Regularized neuron norms concatenated over irreps, shape (atoms, N)."""
        return torch.cat([regularized_norm(v, eps) for v in self.blocks.values()], dim=1)

    def flat(self) -> torch.Tensor:
        return torch.cat([v.reshape(v.shape[0], -1) for v in self.blocks.values()], dim=1)

    def rotate(self, rotation: np.ndarray) -> "EquivariantRep":
        out = {}
        for (l, p), v in self.blocks.items():
            d = torch.from_numpy(o3.wigner_d(l, rotation))
            out[(l, p)] = torch.einsum("xy,any->anx", d, v)
        return EquivariantRep(out)

    def invert(self) -> "EquivariantRep":
        """Spatial inversion: neuron (l, p) picks up p * (-1)^l."""
        return EquivariantRep({(l, p): v * (p * (-1) ** l) for (l, p), v in self.blocks.items()})

    def permute(self, sigma: Sequence[int]) -> "EquivariantRep":
        """Atom A becomes atom sigma[A]."""
        inverse = torch.from_numpy(np.argsort(check_permutation(sigma, self.n_atoms)))
        return EquivariantRep({k: v[inverse] for k, v in self.blocks.items()})

    def detach(self) -> "EquivariantRep":
        return EquivariantRep({k: v.detach() for k, v in self.blocks.items()})


def regularized_norm(x: torch.Tensor, eps: float) -> torch.Tensor:
    """sqrt(sum_m x^2 + eps^2) - eps over the last axis; smooth at zero."""
    return torch.sqrt((x * x).sum(dim=-1) + eps * eps) - eps


def evnorm(
    h: torch.Tensor,
    mean: torch.Tensor,
    std: torch.Tensor,
    inv_beta: torch.Tensor,
    eps: float,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Split neurons (..., N, 2l+1) into a normalized invariant and a capped direction.

    Returns:
        (h_bar, h_hat) with h_bar = (|h| - mean) / std and h_hat = h / (|h| + 1/beta + eps).
    """
    if not torch.all(torch.isfinite(std)) or torch.any(std <= 0):
        raise StatisticsError("EvNorm scale must be positive and finite")
    norm = regularized_norm(h, eps)
    h_bar = (norm - mean) / std
    h_hat = h / (norm + inv_beta + eps).unsqueeze(-1)
    return h_bar, h_hat


class EvNorm(nn.Module):
    """EvNorm over every irrep group.

    ``mode="batch"`` normalizes each neuron with statistics over the atoms of
    the batch (running estimates at eval time); ``mode="layer"`` normalizes
    each atom over the channels of each (l, p) group.
    """

    def __init__(self, channels: Dict[IrrepKey, int], mode: str, eps: float = 0.1, momentum: float = 0.9):
        super().__init__()
        if mode not in ("batch", "layer"):
            raise ValueError(f"unknown EvNorm mode {mode!r}")
        self.channels = dict(channels)
        self.mode = mode
        self.eps = eps
        self.momentum = momentum
        self.beta = nn.ParameterDict()
        for (l, p), n in self.channels.items():
            name = _key_name((l, p))
            self.beta[name] = nn.Parameter(torch.empty(n, dtype=torch.float64).uniform_(0.5, 1.5))
            if mode == "batch":
                self.register_buffer(f"running_mean_{name}", torch.zeros(n, dtype=torch.float64))
                self.register_buffer(f"running_var_{name}", torch.ones(n, dtype=torch.float64))

    def _statistics(self, name: str, norm: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.mode == "layer":
            mean = norm.mean(dim=1, keepdim=True)
            var = norm.var(dim=1, unbiased=False, keepdim=True)
            return mean, torch.sqrt(var + VARIANCE_FLOOR)
        running_mean = getattr(self, f"running_mean_{name}")
        running_var = getattr(self, f"running_var_{name}")
        if self.training:
            mean = norm.mean(dim=0)
            var = norm.var(dim=0, unbiased=False)
            with torch.no_grad():
                running_mean.mul_(self.momentum).add_((1.0 - self.momentum) * mean)
                running_var.mul_(self.momentum).add_((1.0 - self.momentum) * var)
        else:
            mean, var = running_mean, running_var
        if torch.any(var + VARIANCE_FLOOR <= 0):
            raise StatisticsError(f"non-positive variance in EvNorm group {name}")
        return mean, torch.sqrt(var + VARIANCE_FLOOR)

    def forward(self, rep: EquivariantRep) -> Tuple[torch.Tensor, EquivariantRep]:
        bars, hats = [], {}
        for key, h in rep.items():
            name = _key_name(key)
            mean, std = self._statistics(name, regularized_norm(h, self.eps))
            bar, hat = evnorm(h, mean, std, 1.0 / self.beta[name], self.eps)
            bars.append(bar)
            hats[key] = hat
        return torch.cat(bars, dim=1), EquivariantRep(hats)


def _key_name(key: IrrepKey) -> str:
    l, p = key
    return f"l{l}{'e' if p == 1 else 'o'}"


class MLP(nn.Sequential):
    """Two-layer perceptron with SiLU."""

    def __init__(self, n_in: int, hidden: int, n_out: int, zero_last: bool = False):
        super().__init__(
            nn.Linear(n_in, hidden, dtype=torch.float64),
            nn.SiLU(),
            nn.Linear(hidden, n_out, dtype=torch.float64),
        )
        if zero_last:
            nn.init.zeros_(self[2].weight)
            nn.init.zeros_(self[2].bias)


def _split(x: torch.Tensor, channels: Dict[IrrepKey, int]) -> Dict[IrrepKey, torch.Tensor]:
    parts = torch.split(x, list(channels.values()), dim=1)
    return dict(zip(channels, parts))


def _channel_matrix(n_out: int, n_in: int) -> nn.Parameter:
    return nn.Parameter(torch.randn(n_out, n_in, dtype=torch.float64) / math.sqrt(max(n_in, 1)))


class PointwiseInteraction(nn.Module):
    """Gated CG coupling of h with g followed by a residual update.

    Only paths with l1 + l2 <= l_max are summed, and each path couples the
    leading min(N_l1p1, N_l2p2, N_lp) channels of its operands.
    """

    def __init__(
        self,
        channels: Dict[IrrepKey, int],
        norm_mode: str,
        eps: float = 0.1,
        hidden: Optional[int] = None,
        momentum: float = 0.9,
        zero_init_gates: bool = True,
        cg_table: Optional[o3.CgTable] = None,
    ):
        super().__init__()
        self.channels = dict(channels)
        total = sum(self.channels.values())
        hidden = hidden or total
        self.norm_h = EvNorm(self.channels, norm_mode, eps, momentum)
        self.norm_q = EvNorm(self.channels, norm_mode, eps, momentum)
        self.mlp_in = MLP(total, hidden, total)
        self.mlp_out = MLP(total, hidden, total, zero_last=zero_init_gates)
        self.w_in = nn.ParameterDict({_key_name(k): _channel_matrix(n, n) for k, n in self.channels.items()})
        self.w_out = nn.ParameterDict({_key_name(k): _channel_matrix(n, n) for k, n in self.channels.items()})
        table = cg_table or o3.default_cg_table()
        self.paths: List[Tuple[IrrepKey, IrrepKey, IrrepKey, int]] = []
        l_max = max(l for l, _ in self.channels)
        for k1, n1 in self.channels.items():
            for k2, n2 in self.channels.items():
                l1, p1 = k1
                l2, p2 = k2
                if l1 + l2 > l_max:
                    continue
                for l in range(abs(l1 - l2), l1 + l2 + 1):
                    out = (l, p1 * p2 * (-1) ** (l1 + l2 + l))
                    if out not in self.channels:
                        continue
                    n_common = min(n1, n2, self.channels[out])
                    index = len(self.paths)
                    self.register_buffer(f"cg_{index}", torch.from_numpy(np.array(table.block(l1, l2, l))))
                    self.paths.append((k1, k2, out, n_common))
        logger.debug(f"PointwiseInteraction with {len(self.paths)} coupling paths")

    def couple(self, f: EquivariantRep, g: EquivariantRep) -> EquivariantRep:
        """q = g + sum over paths of CG(f, g) on the shared channel prefix."""
        q = dict(g.blocks)
        for index, (k1, k2, out, n) in enumerate(self.paths):
            cg = getattr(self, f"cg_{index}")
            product = torch.einsum("anx,any,xyz->anz", f[k1][:, :n], g[k2][:, :n], cg)
            q[out] = q[out] + F.pad(product, (0, 0, 0, self.channels[out] - n))
        return EquivariantRep(q)

    def forward(self, h: EquivariantRep, g: EquivariantRep) -> EquivariantRep:
        h_bar, h_hat = self.norm_h(h)
        gates = _split(self.mlp_in(h_bar), self.channels)
        f = EquivariantRep({
            k: gates[k].unsqueeze(-1) * torch.einsum("nk,akx->anx", self.w_in[_key_name(k)], h_hat[k])
            for k in self.channels
        })
        q = self.couple(f, g)
        q_bar, q_hat = self.norm_q(q)
        gates = _split(self.mlp_out(q_bar), self.channels)
        return EquivariantRep({
            k: h[k] + torch.einsum("nk,akx->anx", self.w_out[_key_name(k)], gates[k].unsqueeze(-1) * q_hat[k])
            for k in self.channels
        })


class DiagonalReduction(nn.Module):
    """Initial features from on-site blocks contracted with the three-index aux overlaps.

    ``q_tables[l]`` has shape (n_elements, P, P, n_aux_l, 2l+1); rows of
    elements absent from the tables are zero.
    """

    def __init__(self, channels: Dict[IrrepKey, int], n_input_channels: int, q_tables: Dict[int, np.ndarray]):
        super().__init__()
        self.channels = dict(channels)
        self.degrees = sorted(l for l in q_tables if (l, 1) in self.channels)
        self.weights = nn.ParameterDict()
        for l in self.degrees:
            self.register_buffer(f"q_{l}", torch.tensor(q_tables[l], dtype=torch.float64))
            n_aux = q_tables[l].shape[3]
            self.weights[str(l)] = _channel_matrix(self.channels[(l, 1)], n_input_channels * n_aux)

    def forward(self, batch: GraphBatch) -> EquivariantRep:
        h = EquivariantRep.zeros(self.channels, batch.n_atoms)
        for l in self.degrees:
            q = getattr(self, f"q_{l}")[batch.elements]
            raw = torch.einsum("acuv,auvkx->ackx", batch.diag_blocks, q)
            raw = raw.reshape(batch.n_atoms, -1, 2 * l + 1)
            h.blocks[(l, 1)] = torch.einsum("nk,akx->anx", self.weights[str(l)], raw)
        return h


class Matching(nn.Module):
    """Maps p=+1 neurons of degree l <= 2 onto each atom's AO shells (I convolution channels)."""

    def __init__(self, channels: Dict[IrrepKey, int], conv_channels: int):
        super().__init__()
        self.m_l = max_shells_per_degree()
        self.conv_channels = conv_channels
        self.weights = nn.ParameterDict({
            str(l): nn.Parameter(
                torch.randn(conv_channels, self.m_l[l], channels[(l, 1)], dtype=torch.float64)
                / math.sqrt(channels[(l, 1)])
            )
            for l in range(AO_L_MAX + 1)
        })

    def forward(self, h: EquivariantRep, batch: GraphBatch) -> torch.Tensor:
        """Returns rho of shape (atoms, I, P)."""
        n_atoms = batch.n_atoms
        parts = []
        for l in range(AO_L_MAX + 1):
            shell_features = torch.einsum("imn,anx->aimx", self.weights[str(l)], h[(l, 1)])
            parts.append(shell_features.reshape(n_atoms, self.conv_channels, -1))
        parts.append(torch.zeros(n_atoms, self.conv_channels, 1, dtype=torch.float64))
        features = torch.cat(parts, dim=2)
        index = batch.ao_to_feature.unsqueeze(1).expand(-1, self.conv_channels, -1)
        return torch.gather(features, 2, index)


def block_convolution(rho_src: torch.Tensor, blocks: torch.Tensor, w_in: torch.Tensor) -> torch.Tensor:
    """m[e, i, nu] = sum_mu rho_src[e, i, mu] * (sum_c w_in[i, c] blocks[e, c, mu, nu]).

    Args:
        rho_src: (E, I, P) matched features of each pair's source atom.
        blocks: (E, C, P, P) pair blocks with rows on the source atom.
        w_in: (I, C) input-channel mixer.
    """
    per_channel = torch.einsum("eiu,ecuv->eicv", rho_src, blocks)
    return torch.einsum("eicv,ic->eiv", per_channel, w_in)


def morlet(x: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
    """exp(-gamma x^2) cos(pi gamma x), broadcast over a trailing basis axis."""
    x = x.unsqueeze(-1)
    return torch.exp(-gamma * x * x) * torch.cos(math.pi * gamma * x)


class AttentionWeights(nn.Module):
    """Rotation-invariant attention alpha (E, J) from neuron overlaps and block norms."""

    def __init__(
        self,
        channels: Dict[IrrepKey, int],
        n_input_channels: int,
        heads: int,
        morlet_count: int = 16,
        gamma0: float = 0.3,
        ratio: float = 1.08,
        hidden: Optional[int] = None,
    ):
        super().__init__()
        total = sum(channels.values())
        self.total = total
        self.gamma = nn.Parameter(gamma0 * ratio ** torch.arange(morlet_count, dtype=torch.float64))
        self.w_kappa = nn.Linear(n_input_channels * morlet_count, total, bias=False, dtype=torch.float64)
        self.w_alpha = nn.Linear(total, total, bias=False, dtype=torch.float64)
        self.mlp = MLP(total, hidden or total, heads)

    def forward(self, h: EquivariantRep, batch: GraphBatch) -> torch.Tensor:
        src, dst = batch.pair_src, batch.pair_dst
        z = torch.cat([(v[dst] * v[src]).sum(dim=-1) for _, v in h.items()], dim=1)
        basis = morlet(batch.pair_log_norms, self.gamma)
        mask = batch.pair_shell_mask.unsqueeze(1).unsqueeze(-1).to(basis.dtype)
        kappa = self.w_kappa((basis * mask).sum(dim=(2, 3)).flatten(1))
        return self.mlp(self.w_alpha(z) * kappa / math.sqrt(self.total))


class MessagePassing(nn.Module):
    """Aggregates attention-weighted pair messages plus a geometric term into each destination atom."""

    def __init__(self, conv_channels: int, eps: float = 0.1):
        super().__init__()
        self.m_l = max_shells_per_degree()
        self.conv_channels = conv_channels
        self.eps = eps
        self.w_geo = nn.ParameterDict({
            str(l): nn.Parameter(torch.randn(conv_channels, self.m_l[l], dtype=torch.float64) / math.sqrt(self.m_l[l]))
            for l in range(AO_L_MAX + 1)
        })

    def geometric_term(self, messages: torch.Tensor, batch: GraphBatch) -> torch.Tensor:
        """Y_l(x_AB) * W_i^l * |m_AB^i| laid out on the destination atom's AOs."""
        n_pairs = batch.n_pairs
        scale = regularized_norm(messages, self.eps)
        parts = []
        for l in range(AO_L_MAX + 1):
            term = scale[:, :, None, None] * self.w_geo[str(l)][None, :, :, None] * batch.pair_harmonics[l][:, None, None, :]
            parts.append(term.flatten(2))
        parts.append(torch.zeros(n_pairs, self.conv_channels, 1, dtype=torch.float64))
        features = torch.cat(parts, dim=2)
        index = batch.ao_to_feature[batch.pair_dst].unsqueeze(1).expand(-1, self.conv_channels, -1)
        return torch.gather(features, 2, index)

    def forward(self, messages: torch.Tensor, alpha: torch.Tensor, batch: GraphBatch) -> torch.Tensor:
        """Returns (atoms, I * J, P); atoms without neighbours receive zeros."""
        total = messages + self.geometric_term(messages, batch)
        weighted = total.unsqueeze(2) * alpha[:, None, :, None]
        n_ao = messages.shape[-1]
        out = torch.zeros(batch.n_atoms, self.conv_channels, alpha.shape[1], n_ao, dtype=torch.float64)
        out = out.index_add(0, batch.pair_dst, weighted)
        return out.reshape(batch.n_atoms, -1, n_ao)


class ReverseMatching(nn.Module):
    """Scatters aggregated AO-space messages back onto p=+1 neurons of degree l <= 2."""

    def __init__(self, channels: Dict[IrrepKey, int], width: int):
        super().__init__()
        self.channels = dict(channels)
        self.m_l = max_shells_per_degree()
        self.weights = nn.ParameterDict({
            str(l): _channel_matrix(self.channels[(l, 1)], width * self.m_l[l]) for l in range(AO_L_MAX + 1)
        })

    def forward(self, aggregated: torch.Tensor, batch: GraphBatch) -> EquivariantRep:
        n_atoms, width, _ = aggregated.shape
        padded = torch.cat([aggregated, torch.zeros(n_atoms, width, 1, dtype=torch.float64)], dim=2)
        g = EquivariantRep.zeros(self.channels, n_atoms)
        for l in range(AO_L_MAX + 1):
            index = batch.feature_to_ao[l].reshape(n_atoms, 1, -1).expand(-1, width, -1)
            shells = torch.gather(padded, 2, index).reshape(n_atoms, width * self.m_l[l], 2 * l + 1)
            g.blocks[(l, 1)] = torch.einsum("nk,akx->anx", self.weights[str(l)], shells)
        return g
