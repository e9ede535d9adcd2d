"""Bayesian learning of stage probabilities and Weibull holding times.

Two fitting modes share one Gibbs sweep:

``idle``
    Remedies are ignored; every traversal counts toward its stage and every
    holding time toward its cluster as observed.

``intervened``
    Each cycle is governed by the unit's most recent remedy.  The remedy's
    indicator is observed for perfect remedies and is an auxiliary variable
    otherwise, resampled each sweep from its conditional given the reset
    vertex and the governed cycles.  Given the indicators, a responsive edge
    of a remedied root cause has its probability weighted by
    ``1 / (1 + omega)`` (the g map) and its holding scale stretched by
    ``1 + beta`` (the J map).

Stage probabilities under reweighting are sampled exactly with a gamma
augmentation: writing ``theta = G / sum(G)`` with ``G_k ~ Gamma(alpha_k, 1)``,
each observation ``j`` gets ``u_j ~ Gamma(1, sum_k G_k w_jk)`` and then
``G_k | u ~ Gamma(alpha_k + n_k, 1 + sum_j u_j w_jk)``.  Without
reweighting the update is the plain Dirichlet-multinomial one.

Holding times use ``lambda = scale**-shape``: the shape moves by random-walk
Metropolis on ``log shape`` against its lambda-marginal conditional, then
``lambda | shape ~ Gamma(c + n, d + sum t**shape)`` is drawn exactly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammaln, logsumexp

from ceg_remedy.errors import (
    EmptyData,
    InsufficientData,
    ShapeMismatch,
    StructureMismatch,
)
from ceg_remedy.intervention import (
    RemedyClass,
    RemedySpec,
    Strength,
    indicator_distribution,
    make_indicator,
)
from ceg_remedy.semi_markov import Dataset, SemiMarkovModel
from ceg_remedy.tree_core import EventTree, StagedTree, build_staged_tree

logger = logging.getLogger(__name__)


class FitMode(str, Enum):
    INTERVENED = "intervened"
    IDLE = "idle"


@dataclass(frozen=True)
class HoldingPrior:
    # Gamma(shape_a, rate shape_b) on the Weibull shape
    shape_a: float = 2.0
    shape_b: float = 1.0
    # Gamma(rate_c, rate rate_d) on lambda = scale**-shape
    rate_c: float = 1.0
    rate_d: float = 0.001


@dataclass(frozen=True)
class PriorState:
    """Dirichlet hyperparameters per situation (in tree out-edge order) plus
    the holding-time prior shared by every cluster."""

    alpha: Mapping[str, Tuple[float, ...]]
    holding: HoldingPrior = HoldingPrior()
    phantom_units: float = 1.0
    # when set, these replace the strengths declared on every remedy
    omega: Optional[Strength] = None
    beta: Optional[Strength] = None

    def stage_alpha(self, staged: StagedTree, stage: int) -> np.ndarray:
        total = np.zeros(len(staged.labels(stage)))
        for v in staged.stages[stage]:
            by_label = dict(zip((e.label for e in staged.tree.out_edges[v]), self.alpha[v]))
            total += [by_label[lab] for lab in staged.labels(stage)]
        return total


def init_prior(tree: EventTree, phantom_units: float = 1.0,
               holding: HoldingPrior = HoldingPrior()) -> PriorState:
    """Spread ``phantom_units`` of Dirichlet mass over the tree.

    Each edge receives mass proportional to the number of root-to-leaf paths
    through it, so the mass entering a situation equals the mass leaving it.
    """
    if not phantom_units > 0:
        raise ValueError("phantom_units must be positive")
    total = tree.leaf_count[tree.root]
    alpha = {v: tuple(phantom_units * tree.leaf_count[e.head] / total for e in tree.out_edges[v])
             for v in tree.internal}
    return PriorState(alpha, holding, phantom_units)


def update_transition_posterior(prior_alpha, counts) -> np.ndarray:
    prior_alpha = np.asarray(prior_alpha, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if prior_alpha.shape != counts.shape:
        raise ShapeMismatch("counts not aligned with alpha",
                            alpha=list(prior_alpha.shape), counts=list(counts.shape))
    if (counts < 0).any():
        raise ShapeMismatch("negative counts")
    return prior_alpha + counts


def dirichlet_moments(alpha) -> Tuple[np.ndarray, np.ndarray]:
    alpha = np.asarray(alpha, dtype=float)
    a0 = alpha.sum()
    mean = alpha / a0
    return mean, np.sqrt(mean * (1.0 - mean) / (a0 + 1.0))


# ------------------------------------------------------------ holding chain

class _HoldingChain:
    """State of one Weibull cluster's (shape, lambda) chain."""

    def __init__(self, prior: HoldingPrior, shape: float, proposal_sd: float = 0.1,
                 fix_shape: Optional[float] = None):
        self.prior = prior
        self.fix_shape = fix_shape
        self.shape = fix_shape if fix_shape is not None else shape
        self.lam = 1.0
        self.sd = proposal_sd
        self.accepted = 0
        self.proposed = 0
        self._window_acc = 0
        self._window_n = 0

    def _log_target(self, shape: float, logt: np.ndarray, sum_logt: float) -> float:
        p, n = self.prior, logt.size
        log_s = _logsumexp(shape * logt)
        return ((p.shape_a - 1.0 + n + 1.0) * math.log(shape) - p.shape_b * shape
                + (shape - 1.0) * sum_logt
                - (p.rate_c + n) * np.logaddexp(math.log(p.rate_d), log_s))

    def step(self, logt: np.ndarray, sum_logt: float, rng: np.random.Generator,
             adapt: bool = False) -> None:
        if self.fix_shape is None:
            cur = self._log_target(self.shape, logt, sum_logt)
            prop = self.shape * math.exp(self.sd * rng.standard_normal())
            new = self._log_target(prop, logt, sum_logt)
            self.proposed += 1
            self._window_n += 1
            if math.log(rng.random()) < new - cur:
                self.shape = prop
                self.accepted += 1
                self._window_acc += 1
            if adapt and self._window_n == 50:
                rate = self._window_acc / 50
                if rate < 0.2:
                    self.sd *= 0.8
                elif rate > 0.5:
                    self.sd *= 1.25
                self._window_acc = self._window_n = 0
        n = logt.size
        log_rate = np.logaddexp(math.log(self.prior.rate_d), _logsumexp(self.shape * logt))
        self.lam = rng.gamma(self.prior.rate_c + n) * math.exp(-log_rate)

    @property
    def acceptance(self) -> float:
        return self.accepted / self.proposed if self.proposed else 1.0


def _logsumexp(x: np.ndarray) -> float:
    m = float(x.max())
    return m + math.log(float(np.exp(x - m).sum()))


def _initial_shape(logt: np.ndarray) -> float:
    sd = float(np.std(logt)) if logt.size > 1 else 0.0
    # sd of log T is pi / (shape * sqrt(6)) for a Weibull variable
    return float(np.clip(math.pi / (math.sqrt(6.0) * sd), 0.05, 50.0)) if sd > 0 else 1.0


@dataclass
class HoldingSamples:
    shape: np.ndarray
    lam: np.ndarray
    acceptance: float

    @property
    def scale(self) -> np.ndarray:
        return self.lam ** (-1.0 / self.shape)

    @property
    def mean_time(self) -> np.ndarray:
        return self.scale * np.exp(gammaln(1.0 + 1.0 / self.shape))


def mcmc_holding_cluster(times, prior: HoldingPrior, iters: int, burnin: int,
                         rng: np.random.Generator, fix_shape: Optional[float] = None,
                         proposal_sd: float = 0.1) -> HoldingSamples:
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise EmptyData("no holding times in cluster")
    if not iters > burnin >= 0:
        raise ValueError("need iters > burnin >= 0")
    logt = np.log(np.maximum(times, np.finfo(float).tiny))
    sum_logt = float(logt.sum())
    chain = _HoldingChain(prior, _initial_shape(logt), proposal_sd, fix_shape)
    shapes, lams = np.empty(iters - burnin), np.empty(iters - burnin)
    for it in range(iters):
        chain.step(logt, sum_logt, rng, adapt=it < burnin)
        if it >= burnin:
            shapes[it - burnin] = chain.shape
            lams[it - burnin] = chain.lam
    return HoldingSamples(shapes, lams, chain.acceptance)


def effective_sample_size(x: np.ndarray) -> float:
    """Geyer initial-positive-sequence estimate."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or np.var(x) == 0:
        return float(n)
    xc = x - x.mean()
    f = np.fft.rfft(xc, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (np.arange(n, 0, -1) * np.var(x))
    tau = 1.0
    for k in range(1, n - 1, 2):
        pair = acf[k] + acf[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(n / tau)


# ----------------------------------------------------------- posterior

@dataclass(frozen=True)
class StagePosterior:
    members: Tuple[str, ...]
    labels: Tuple[str, ...]
    mean: Tuple[float, ...]
    sd: Tuple[float, ...]
    alpha: Tuple[float, ...]


@dataclass(frozen=True)
class ClusterPosterior:
    edges: Tuple[str, ...]
    shape_mean: float
    scale_mean: float
    mean_time: float
    mean_time_sd: float
    shape_samples: Tuple[float, ...]
    scale_samples: Tuple[float, ...]
    acceptance: float
    ess: float


@dataclass(frozen=True)
class PosteriorSummary:
    mode: FitMode
    iters: int
    burnin: int
    stages: Tuple[StagePosterior, ...]
    clusters: Tuple[ClusterPosterior, ...]
    # base-regime equivalent traversal counts per situation, tree out-edge order
    expected_counts: Mapping[str, Tuple[float, ...]]
    indicator_frequencies: Mapping[str, Mapping[str, float]]
    # per edge, holding times with the J map undone where the chain says so;
    # kept for structure selection and not serialized
    edge_times: Optional[Mapping[str, np.ndarray]] = field(default=None, compare=False, repr=False)

    @property
    def n_samples(self) -> int:
        return self.iters - self.burnin

    def stage_of(self, vertex: str) -> StagePosterior:
        for s in self.stages:
            if vertex in s.members:
                return s
        raise KeyError(vertex)

    def theta(self, vertex: str, label: str) -> float:
        s = self.stage_of(vertex)
        return s.mean[s.labels.index(label)]

    def cluster_of(self, edge: str) -> ClusterPosterior:
        for c in self.clusters:
            if edge in c.edges:
                return c
        raise KeyError(edge)


@dataclass(frozen=True)
class FitSettings:
    iters: int = 5000
    burnin: int = 1000
    # "sample": indicators resampled each sweep; "plugin": fixed at the most
    # probable indicator consistent with the observed reset
    indicator_mode: str = "sample"
    # treat the indicator column of the log as observed for every remedy
    use_recorded_indicators: bool = False
    proposal_sd: float = 0.1
    # clamp every cluster's Weibull shape (diagnostics and oracle tests)
    fix_shape: Optional[float] = None

    def __post_init__(self):
        if not self.iters > self.burnin >= 0:
            raise ValueError("need iters > burnin >= 0")
        if self.indicator_mode not in ("sample", "plugin"):
            raise ValueError(f"unknown indicator_mode {self.indicator_mode!r}")


# --------------------------------------------------------------- fit

class _Design:
    """Flattened observations of a dataset against a fit structure."""

    def __init__(self, model: SemiMarkovModel, dataset: Dataset, staged: StagedTree,
                 clusters: Sequence[Sequence[str]], remedies: Mapping[str, RemedySpec],
                 mode: FitMode, prior: PriorState, settings: FitSettings):
        tree = model.tree
        self.tree, self.staged = tree, staged
        self.clusters = [tuple(c) for c in clusters]
        self.vertices = list(tree.internal)
        vidx = {v: i for i, v in enumerate(self.vertices)}
        R = len(model.root_causes)
        self.R = R
        rc = model.root_causes

        # events: one per remedy followed by a cycle; index n_events = "none"
        ev_remedy: List[RemedySpec] = []
        ev_realized: List[int] = []
        ev_reset_root: List[bool] = []
        ev_recorded: List[Optional[Tuple[int, ...]]] = []
        t_vertex, t_edge, t_gov = [], [], []
        h_edge, h_time, h_gov = [], [], []
        intervened = mode is FitMode.INTERVENED
        for unit in dataset.units:
            gov = -1
            for cyc in unit.cycles:
                for st in cyc.steps:
                    e = tree.edge.get(st.edge)
                    if e is None:
                        raise StructureMismatch(f"dataset edge {st.edge} not in model")
                    t_vertex.append(vidx[e.tail])
                    t_edge.append(e.id)
                    t_gov.append(gov)
                    if e.holding is not None:
                        h_edge.append(e.id)
                        h_time.append(st.holding_time)
                        h_gov.append(gov)
                if intervened and cyc.remedy is not None:
                    ev = cyc.remedy
                    spec = remedies.get(ev.remedy_id)
                    if spec is None:
                        raise StructureMismatch(f"unknown remedy {ev.remedy_id} in dataset")
                    realized = model.realized_root(cyc.start, cyc.edges)
                    ev_remedy.append(spec)
                    ev_realized.append(rc.index(realized) if realized else -1)
                    ev_reset_root.append(ev.reset_vertex == tree.root)
                    ev_recorded.append(ev.indicator.bits if ev.indicator is not None else None)
                    gov = len(ev_remedy) - 1
        if not t_edge:
            raise InsufficientData("dataset has no complete cycles")

        self.n_events = E = len(ev_remedy)
        self.ev_remedy = ev_remedy
        t_gov = np.array(t_gov, dtype=int)
        t_gov[t_gov < 0] = E
        h_gov = np.array(h_gov, dtype=int)
        h_gov[h_gov < 0] = E

        # indicator table: fixed rows plus candidate sets for latent rows
        self.bits = np.zeros((E + 1, R + 1), dtype=np.int8)  # last column stays 0
        self.latent: List[int] = []
        self.cand: List[np.ndarray] = []
        self.cand_logp: List[np.ndarray] = []
        for m, spec in enumerate(ev_remedy):
            if spec.remedy_class is RemedyClass.PERFECT:
                self.bits[m, :R] = make_indicator(spec, rc).bits
                continue
            if settings.use_recorded_indicators and ev_recorded[m] is not None:
                self.bits[m, :R] = ev_recorded[m]
                continue
            dist = indicator_distribution(spec, rc)
            k = ev_realized[m]
            ok = [(ind.bits, p) for ind, p in dist.support
                  if k < 0 or ind.bits[k] == int(ev_reset_root[m])]
            if not ok:
                ok = [(ind.bits, p) for ind, p in dist.support]
            cb = np.array([b for b, _ in ok], dtype=np.int8)
            lp = np.log(np.array([p for _, p in ok]))
            lp -= logsumexp(lp)
            self.latent.append(m)
            self.cand.append(cb)
            self.cand_logp.append(lp)
            self.bits[m, :R] = cb[int(np.argmax(lp))]
        self.latent_arr = np.array(self.latent, dtype=int)

        # strengths per (event, vertex); last row is the no-event row
        def strength(spec, v, which):
            override = prior.omega if which == "omega" else prior.beta
            if override is not None:
                return override
            return spec.omega_for(v) if which == "omega" else spec.beta_for(v)

        nv = len(self.vertices)
        self.omega_laws = [[strength(s, v, "omega") for v in self.vertices] for s in ev_remedy]
        self.beta_laws = [[strength(s, v, "beta") for v in self.vertices] for s in ev_remedy]
        self.random_strengths = any(l.is_random for row in self.omega_laws + self.beta_laws for l in row)
        self.omega = np.zeros((E + 1, nv))
        self.beta = np.zeros((E + 1, nv))
        for m in range(E):
            for i in range(nv):
                law_o, law_b = self.omega_laws[m][i], self.beta_laws[m][i]
                self.omega[m, i] = law_o.value if law_o.value is not None else math.exp(law_o.mean_log)
                self.beta[m, i] = law_b.value if law_b.value is not None else math.exp(law_b.mean_log)

        # per-stage transition blocks
        control = model.control
        nv_all = len(self.vertices)
        self.stage_blocks = []
        t_vertex = np.array(t_vertex, dtype=int)
        t_edge_arr = np.array(t_edge)
        for s, members in enumerate(staged.stages):
            labels = staged.labels(s)
            D = len(labels)
            idx_parts, col_parts, ctrl_rows = [], [], {}
            for v in members:
                aligned = staged.aligned_edges(v)
                colmap = {e.id: d for d, e in enumerate(aligned)}
                ctrl_rows[vidx[v]] = np.array([control.get(e.id, R) for e in aligned], dtype=int)
                sel = np.nonzero(t_vertex == vidx[v])[0]
                idx_parts.append(sel)
                col_parts.append(np.array([colmap[x] for x in t_edge_arr[sel]], dtype=int))
            sel = np.concatenate(idx_parts)
            col = np.concatenate(col_parts)
            verts = t_vertex[sel]
            ctrl = np.stack([ctrl_rows[v] for v in verts]) if sel.size else np.zeros((0, D), dtype=int)
            gov = t_gov[sel]
            counts = np.bincount(col, minlength=D).astype(float)
            maxdeg = max(len(tree.out_edges[v]) for v in self.vertices)
            tree_col = np.empty(sel.size, dtype=int)
            for vi in np.unique(verts):
                order = {e.label: k for k, e in enumerate(tree.out_edges[self.vertices[vi]])}
                to_tree = np.array([order[lab] for lab in labels])
                mask = verts == vi
                tree_col[mask] = to_tree[col[mask]]
            flat = verts * maxdeg + tree_col
            flat_counts = np.bincount(flat, minlength=nv_all * maxdeg).astype(float)
            responsive = bool(intervened and (ctrl < R).any() and (gov < E).any())
            aff = np.nonzero((gov < E) & (ctrl < R).any(axis=1))[0] if responsive else np.zeros(0, dtype=int)
            unaff = np.ones(sel.size, dtype=bool)
            unaff[aff] = False
            self.stage_blocks.append(dict(
                aff=dict(gov=gov[aff], ctrl=ctrl[aff], verts=verts[aff], col=col[aff], flat=flat[aff]),
                n_unaff=int(unaff.sum()),
                flat_counts_unaff=np.bincount(flat[unaff], minlength=nv_all * maxdeg).astype(float),
                labels=labels, D=D, col=col, verts=verts, ctrl=ctrl, gov=gov,
                counts=counts, alpha=prior.stage_alpha(staged, s), responsive=responsive,
                flat=flat, flat_counts=flat_counts,
            ))

        # per-cluster holding blocks
        h_edge_arr = np.array(h_edge)
        h_time = np.maximum(np.array(h_time, dtype=float), np.finfo(float).tiny)
        h_ctrl = np.array([control.get(e, R) for e in h_edge], dtype=int)
        h_tail = np.array([vidx[tree.edge[e].tail] for e in h_edge], dtype=int)
        self.hold_blocks = []
        for c in self.clusters:
            sel = np.nonzero(np.isin(h_edge_arr, c))[0] if h_edge else np.zeros(0, dtype=int)
            logt = np.log(h_time[sel])
            responsive = bool(intervened and (h_ctrl[sel] < R).any() and (h_gov[sel] < E).any())
            self.hold_blocks.append(dict(
                sel=sel, logt=logt, sum_logt=float(logt.sum()), gov=h_gov[sel],
                ctrl=h_ctrl[sel], tail=h_tail[sel], responsive=responsive,
            ))
        self.h_edge, self.h_time = h_edge_arr, h_time

        # padded candidate tables and the observations each latent row governs
        S = max((len(c) for c in self.cand), default=0)
        self.cand_pad = np.zeros((len(self.latent), S, R), dtype=np.int8)
        self.cand_logp_pad = np.full((len(self.latent), S), -np.inf)
        for i, (cb, lp) in enumerate(zip(self.cand, self.cand_logp)):
            self.cand_pad[i, :len(cb)] = cb
            self.cand_pad[i, len(cb):] = cb[0]
            self.cand_logp_pad[i, :len(lp)] = lp
        is_latent = np.zeros(E + 1, dtype=bool)
        is_latent[self.latent_arr] = True
        self.latent_stage_obs = []
        for s, blk in enumerate(self.stage_blocks):
            g = is_latent[blk["gov"]]
            if blk["responsive"] and g.any():
                self.latent_stage_obs.append((s, {k: blk[k][g] for k in ("gov", "ctrl", "verts", "col")}))
        self.latent_hold_obs = []
        for c, blk in enumerate(self.hold_blocks):
            g = is_latent[blk["gov"]]
            if blk["responsive"] and g.any():
                self.latent_hold_obs.append((c, {k: blk[k][g] for k in ("gov", "ctrl", "tail", "logt")}))

    def draw_strengths(self, rng: np.random.Generator) -> None:
        for m in range(self.n_events):
            for i in range(len(self.vertices)):
                if self.omega_laws[m][i].is_random:
                    self.omega[m, i] = self.omega_laws[m][i].sample(rng)
                if self.beta_laws[m][i].is_random:
                    self.beta[m, i] = self.beta_laws[m][i].sample(rng)

    # weights / deflation under a given indicator table

    def stage_weights(self, blk, bits: np.ndarray) -> np.ndarray:
        on = bits[blk["gov"][:, None], blk["ctrl"]]
        om = self.omega[blk["gov"], blk["verts"]]
        return 1.0 / (1.0 + om[:, None] * on)

    def log_deflation(self, blk, bits: np.ndarray) -> np.ndarray:
        on = bits[blk["gov"], blk["ctrl"]]
        return on * np.log1p(self.beta[blk["gov"], blk["tail"]])


def _dirichlet_gamma(alpha: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_gamma(alpha)
    return g / g.sum()


def fit(dataset: Dataset, model: SemiMarkovModel, mode: FitMode | str = FitMode.INTERVENED,
        prior: Optional[PriorState] = None, settings: FitSettings = FitSettings(),
        rng: Optional[np.random.Generator] = None, *,
        remedies: Optional[Mapping[str, RemedySpec]] = None,
        stages: Optional[Sequence[Sequence[str]]] = None,
        clusters: Optional[Sequence[Sequence[str]]] = None) -> PosteriorSummary:
    """Fit stage probabilities and holding laws by MCMC-within-Gibbs.

    ``stages`` and ``clusters`` default to the model's declared structure.
    ``rng`` seeds three independent streams (indicators, stage draws,
    holding chains), so a mode that skips one stream leaves the others
    untouched.
    """
    mode = FitMode(mode)
    if prior is None:
        prior = init_prior(model.tree)
    if rng is None:
        rng = np.random.default_rng()
    remedies = remedies or {}
    if tuple(dataset.root_causes) != tuple(model.root_causes):
        raise StructureMismatch("dataset and model disagree on root causes")
    staged = build_staged_tree(model.tree, stages) if stages is not None else model.staged
    clusters = model.holding_clusters if clusters is None else clusters
    timed = set(model.timed_edges)
    if {e for c in clusters for e in c} != timed:
        raise StructureMismatch("holding clusters must cover exactly the timed edges")

    d = _Design(model, dataset, staged, clusters, remedies, mode, prior, settings)
    r_ind, r_theta, r_hold = (np.random.Generator(np.random.PCG64(s))
                              for s in np.random.SeedSequence(int(rng.integers(2**63))).spawn(3))
    iters, burnin = settings.iters, settings.burnin
    n_keep = iters - burnin
    sample_indicators = bool(d.latent) and settings.indicator_mode == "sample"
    need_theta = sample_indicators

    # state
    thetas = []
    gstate = []
    for blk in d.stage_blocks:
        mean = (blk["alpha"] + blk["counts"]) / (blk["alpha"] + blk["counts"]).sum()
        thetas.append(mean)
        gstate.append(mean.copy())
    chains = []
    for blk in d.hold_blocks:
        logt = blk["logt"] if blk["logt"].size else np.zeros(1)
        chains.append(_HoldingChain(prior.holding, _initial_shape(logt), settings.proposal_sd,
                                    settings.fix_shape))

    theta_samples = [np.empty((n_keep, blk["D"])) for blk in d.stage_blocks]
    stage_shifted = [False] * len(d.stage_blocks)
    nv, maxdeg = len(d.vertices), max(len(d.tree.out_edges[v]) for v in d.vertices)
    exp_counts = np.zeros(nv * maxdeg)
    shape_s = [np.empty(n_keep) for _ in d.hold_blocks]
    lam_s = [np.empty(n_keep) for _ in d.hold_blocks]
    deflate_hits = np.zeros(d.h_time.size)
    remedy_ids = sorted({spec.id for spec in d.ev_remedy})
    ev_code_group = np.array([remedy_ids.index(spec.id) for spec in d.ev_remedy], dtype=int)
    place = 2 ** np.arange(d.R)[::-1]
    ind_counts = np.zeros((len(remedy_ids), 2 ** d.R))

    for it in range(iters):
        keep = it >= burnin
        if d.random_strengths:
            d.draw_strengths(r_ind)
        if sample_indicators:
            _sample_indicators(d, thetas, chains, r_ind)

        for s, blk in enumerate(d.stage_blocks):
            sub = blk["aff"]
            shifted = blk["responsive"] and bool(
                (d.bits[sub["gov"][:, None], sub["ctrl"]] * d.omega[sub["gov"], sub["verts"]][:, None]).any())
            if shifted:
                w = d.stage_weights(sub, d.bits)
                g = gstate[s]
                u = r_theta.standard_exponential(w.shape[0]) / (w @ g)
                # unweighted rows: their exponential variables sum to one gamma draw
                uw = u @ w + r_theta.standard_gamma(blk["n_unaff"]) / g.sum() if blk["n_unaff"] else u @ w
                g = r_theta.standard_gamma(blk["alpha"] + blk["counts"]) / (1.0 + uw)
                gstate[s] = g
                thetas[s] = g / g.sum()
                stage_shifted[s] = True
            elif need_theta or stage_shifted[s]:
                # exact draw: theta ~ Dirichlet, total mass ~ prior Gamma, independent
                g = r_theta.standard_gamma(blk["alpha"] + blk["counts"])
                thetas[s] = g / g.sum()
                gstate[s] = thetas[s] * r_theta.standard_gamma(blk["alpha"].sum())
            if keep:
                theta_samples[s][it - burnin] = thetas[s]
                if shifted:
                    contrib = (w @ thetas[s]) / w[np.arange(w.shape[0]), sub["col"]]
                    exp_counts += blk["flat_counts_unaff"]
                    exp_counts += np.bincount(sub["flat"], weights=contrib, minlength=exp_counts.size)
                else:
                    exp_counts += blk["flat_counts"]

        for c, blk in enumerate(d.hold_blocks):
            if blk["sel"].size == 0:
                continue
            logt, sum_logt = blk["logt"], blk["sum_logt"]
            if blk["responsive"]:
                ld = d.log_deflation(blk, d.bits)
                if ld.any():
                    logt = logt - ld
                    sum_logt = float(logt.sum())
                    if keep:
                        deflate_hits[blk["sel"]] += ld > 0
            chains[c].step(logt, sum_logt, r_hold, adapt=it < burnin)
            if keep:
                shape_s[c][it - burnin] = chains[c].shape
                lam_s[c][it - burnin] = chains[c].lam

        if keep and d.n_events:
            codes = d.bits[:d.n_events, :d.R] @ place
            np.add.at(ind_counts, (ev_code_group, codes), 1)

    exp_counts = exp_counts.reshape(nv, maxdeg) / n_keep
    stages_out = []
    for s, blk in enumerate(d.stage_blocks):
        if stage_shifted[s]:
            mean = theta_samples[s].mean(axis=0)
            sd = theta_samples[s].std(axis=0)
        else:
            mean, sd = dirichlet_moments(blk["alpha"] + blk["counts"])
        members = staged.stages[s]
        base = np.zeros(blk["D"])
        for v in members:
            row = exp_counts[d.vertices.index(v)]
            by_label = {e.label: row[k] for k, e in enumerate(d.tree.out_edges[v])}
            base += [by_label[lab] for lab in blk["labels"]]
        stages_out.append(StagePosterior(tuple(members), tuple(blk["labels"]),
                                         tuple(map(float, mean)), tuple(map(float, sd)),
                                         tuple(map(float, blk["alpha"] + base))))

    clusters_out = []
    for c, blk in enumerate(d.hold_blocks):
        if blk["sel"].size == 0:
            clusters_out.append(ClusterPosterior(tuple(d.clusters[c]), math.nan, math.nan, math.nan,
                                                 math.nan, (), (), 1.0, 0.0))
            continue
        hs = HoldingSamples(shape_s[c], lam_s[c], chains[c].acceptance)
        mt = hs.mean_time
        clusters_out.append(ClusterPosterior(
            tuple(d.clusters[c]), float(hs.shape.mean()), float(hs.scale.mean()),
            float(mt.mean()), float(mt.std()), tuple(map(float, hs.shape)),
            tuple(map(float, hs.scale)), float(hs.acceptance), effective_sample_size(mt)))

    # MAP deflation of each observed holding time, for structure selection
    times = d.h_time.copy()
    if d.n_events:
        flag = deflate_hits / n_keep >= 0.5
        if flag.any():
            R = d.R
            for blk in d.hold_blocks:
                sel = blk["sel"][flag[blk["sel"]]]
                if sel.size:
                    pos = np.searchsorted(blk["sel"], sel)
                    beta = d.beta[blk["gov"][pos], blk["tail"][pos]]
                    times[sel] = times[sel] / (1.0 + beta)
    edge_times = {e: times[d.h_edge == e] for e in model.timed_edges}

    freqs = {}
    for g, rid in enumerate(remedy_ids):
        total = ind_counts[g].sum()
        freqs[rid] = {format(code, f"0{d.R}b"): float(n / total)
                      for code, n in enumerate(ind_counts[g]) if n > 0}
    return PosteriorSummary(
        mode=mode, iters=iters, burnin=burnin,
        stages=tuple(stages_out), clusters=tuple(clusters_out),
        expected_counts={v: tuple(float(x) for x in exp_counts[i, :len(d.tree.out_edges[v])])
                         for i, v in enumerate(d.vertices)},
        indicator_frequencies=freqs, edge_times=edge_times,
    )


def _sample_indicators(d: _Design, thetas, chains, rng: np.random.Generator) -> None:
    """Resample every latent indicator from its full conditional."""
    L, S = d.cand_pad.shape[:2]
    logits = d.cand_logp_pad.copy()
    for s in range(S):
        trial = d.bits.copy()
        trial[d.latent_arr, :d.R] = d.cand_pad[:, s]
        ll = np.zeros(d.n_events + 1)
        for sb, sub in d.latent_stage_obs:
            w = d.stage_weights(sub, trial)
            tw = w * thetas[sb]
            lp = np.log(tw[np.arange(tw.shape[0]), sub["col"]]) - np.log(tw.sum(axis=1))
            ll += np.bincount(sub["gov"], weights=lp, minlength=d.n_events + 1)
        for c, sub in d.latent_hold_obs:
            ld = d.log_deflation(sub, trial)
            logt = sub["logt"] - ld
            # Weibull log-density of the deflated time plus the Jacobian of deflation
            k, lam = chains[c].shape, chains[c].lam
            lp = math.log(k) + math.log(lam) + (k - 1.0) * logt - lam * np.exp(k * logt) - ld
            ll += np.bincount(sub["gov"], weights=lp, minlength=d.n_events + 1)
        logits[:, s] += ll[d.latent_arr]
    pick = np.argmax(logits + rng.gumbel(size=logits.shape), axis=1)
    d.bits[d.latent_arr, :d.R] = d.cand_pad[np.arange(L), pick]
