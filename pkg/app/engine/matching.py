"""
Module: matching.py
Description: This module solves the satellite-RUE-cluster association as a many-to-one matching
game. RUEs are grouped into proximity clusters, an initial matching is built by deferred
acceptance over channel-gain preferences, and swap-blocking pairs are removed until the matching
is two-sided exchange-stable. The final matching is turned into a binary association vector that
respects each satellite's beam budget.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, List, Mapping, Optional, Protocol, Sequence, Set, Tuple

import numpy as np
from sklearn.cluster import KMeans

from app.engine.channel import LinkChannel, sinr_matrix, steering_correlation
from app.engine.geometry import RueState
from app.exceptions import ConfigurationError, MatchingError
from app.schemas import MatchInstance, MatchResult, RadioConfig

logger = logging.getLogger(__name__)

UNMATCHED = None
STRICT_TOL = 1e-12


@dataclass(frozen=True)
class Cluster:
    """A proximity group of RUEs."""
    cluster_id: int
    member_rues: Tuple[int, ...]
    centroid: Tuple[float, float]


@dataclass
class PreferenceLists:
    """
    Attributes:
        cluster_prefs (dict): cluster_id -> sat_ids in descending preference.
        sat_scores (dict): sat_id -> {cluster_id -> score} used by satellites to rank proposals.
    """
    cluster_prefs: Dict[int, List[int]]
    sat_scores: Dict[int, Dict[int, float]]


@dataclass
class Matching:
    """Many-to-one matching of clusters to satellites."""
    mu_cluster: Dict[int, Optional[int]]
    mu_sat: Dict[int, Set[int]]
    capacity: Dict[int, int]
    proposals: int = 0
    swaps: int = 0

    @classmethod
    def empty(cls, cluster_ids, capacity: Mapping[int, int]) -> "Matching":
        return cls(mu_cluster={k: UNMATCHED for k in cluster_ids},
                   mu_sat={s: set() for s in capacity},
                   capacity=dict(capacity))

    def copy(self) -> "Matching":
        return Matching(mu_cluster=dict(self.mu_cluster),
                        mu_sat={s: set(ks) for s, ks in self.mu_sat.items()},
                        capacity=dict(self.capacity), proposals=self.proposals, swaps=self.swaps)

    def assign(self, k: int, s: int) -> None:
        self.mu_cluster[k] = s
        self.mu_sat.setdefault(s, set()).add(k)

    def swapped(self, i: int, j: int) -> "Matching":
        """Clusters i and j exchange their satellites; everything else is kept."""
        n, m = self.mu_cluster[i], self.mu_cluster[j]
        out = self.copy()
        out.mu_sat[n].discard(i)
        out.mu_sat[m].discard(j)
        out.assign(i, m)
        out.assign(j, n)
        return out

    def key(self) -> Tuple:
        return tuple(sorted(self.mu_cluster.items()))

    def validate(self) -> None:
        """
        Raises:
            MatchingError: If a satellite is over capacity or the two maps disagree.
        """
        for s, ks in self.mu_sat.items():
            if len(ks) > self.capacity.get(s, 0):
                raise MatchingError(f"satellite {s} holds {len(ks)} clusters over capacity")
            for k in ks:
                if self.mu_cluster.get(k) != s:
                    raise MatchingError(f"cluster {k} listed under satellite {s} but mapped elsewhere")
        for k, s in self.mu_cluster.items():
            if s is not UNMATCHED and k not in self.mu_sat.get(s, set()):
                raise MatchingError(f"cluster {k} mapped to {s} but missing from its set")


@dataclass(frozen=True)
class AssociationVector:
    """Binary satellite-RUE association; holds the pairs with chi = 1."""
    pairs: FrozenSet[Tuple[int, int]] = field(default_factory=frozenset)

    def __getitem__(self, key: Tuple[int, int]) -> int:
        return int(key in self.pairs)

    def serving(self) -> Dict[int, int]:
        """rue_id -> sat_id for associated RUEs."""
        return {u: s for s, u in self.pairs}

    def beams(self, sat_id: int) -> List[int]:
        return sorted(u for s, u in self.pairs if s == sat_id)

    def matrix(self, sat_ids: Sequence[int], rue_ids: Sequence[int]) -> np.ndarray:
        s_index = {s: i for i, s in enumerate(sat_ids)}
        u_index = {u: i for i, u in enumerate(rue_ids)}
        out = np.zeros((len(sat_ids), len(rue_ids)), dtype=bool)
        for s, u in self.pairs:
            out[s_index[s], u_index[u]] = True
        return out

    def validate(self, n_beam: int) -> None:
        """
        Raises:
            MatchingError: If a RUE has two satellites or a satellite exceeds n_beam.
        """
        rues = [u for _, u in self.pairs]
        if len(rues) != len(set(rues)):
            raise MatchingError("a RUE is associated with more than one satellite")
        for s in {s for s, _ in self.pairs}:
            if len(self.beams(s)) > n_beam:
                raise MatchingError(f"satellite {s} exceeds its beam budget")


class UtilityModel(Protocol):
    """Utilities of clusters and satellites under a matching."""

    def cluster_utility(self, mu: Matching, k: int) -> float: ...

    def satellite_utility(self, mu: Matching, s: int) -> float: ...

    def is_admissible(self, k: int, s: int) -> bool: ...


class TableUtilities:
    """Fixed utilities U[k][s] without peer effects; satellites sum their clusters."""

    def __init__(self, table: Mapping[int, Mapping[int, float]]):
        self.table = {k: dict(v) for k, v in table.items()}

    def cluster_utility(self, mu: Matching, k: int) -> float:
        s = mu.mu_cluster.get(k)
        return 0.0 if s is UNMATCHED else float(self.table.get(k, {}).get(s, 0.0))

    def satellite_utility(self, mu: Matching, s: int) -> float:
        return sum(self.cluster_utility(mu, k) for k in mu.mu_sat.get(s, ()))

    def is_admissible(self, k: int, s: int) -> bool:
        return s in self.table.get(k, {})


class SpectrumUtilities:
    """
    Spectrum-efficiency utilities with peer effects.

    Each satellite splits P_max equally over the RUEs it serves under the matching; a member's
    utility term is log2(1 + SINR) with interference from every other served beam.
    """

    def __init__(self, clusters: Sequence[Cluster], links: Mapping[Tuple[int, int], LinkChannel],
                 sat_ids: Sequence[int], rue_ids: Sequence[int], radio: RadioConfig, noise_power_lin: float):
        self.clusters = {c.cluster_id: c for c in clusters}
        self.links = links
        self.sat_ids = list(sat_ids)
        self.rue_ids = list(rue_ids)
        self.radio = radio
        self.noise = noise_power_lin
        self._s = {s: i for i, s in enumerate(self.sat_ids)}
        self._u = {u: i for i, u in enumerate(self.rue_ids)}
        n_ant = radio.n_antennas
        self.gains = np.zeros((len(self.sat_ids), len(self.rue_ids)))
        steering = np.zeros((len(self.sat_ids), len(self.rue_ids), n_ant), dtype=complex)
        for (s, u), link in links.items():
            self.gains[self._s[s], self._u[u]] = link.gain_g
            steering[self._s[s], self._u[u]] = link.steering
        self.correlation = steering_correlation(steering)
        self._cache: Dict[Tuple, np.ndarray] = {}

    def _link_se(self, mu: Matching) -> np.ndarray:
        key = mu.key()
        if key not in self._cache:
            assoc = to_association(mu, self.clusters.values(), gain_squares(self.links), self.radio.n_beam)
            served = assoc.matrix(self.sat_ids, self.rue_ids)
            counts = served.sum(axis=1, keepdims=True)
            power = np.where(served, self.radio.p_max / np.maximum(counts, 1), 0.0)
            gamma = sinr_matrix(self.gains, self.correlation, power, served, self.noise)
            self._cache[key] = np.where(served, np.log2(1.0 + gamma), 0.0)
        return self._cache[key]

    def cluster_utility(self, mu: Matching, k: int) -> float:
        s = mu.mu_cluster.get(k)
        if s is UNMATCHED:
            return 0.0
        se = self._link_se(mu)
        return float(sum(se[self._s[s], self._u[u]] for u in self.clusters[k].member_rues))

    def satellite_utility(self, mu: Matching, s: int) -> float:
        return sum(self.cluster_utility(mu, k) for k in mu.mu_sat.get(s, ()))

    def is_admissible(self, k: int, s: int) -> bool:
        return any((s, u) in self.links for u in self.clusters[k].member_rues)


def gain_squares(links: Mapping[Tuple[int, int], LinkChannel]) -> Dict[Tuple[int, int], float]:
    """|h_{s,u}|^2 for every visible link."""
    return {key: link.gain_g ** 2 for key, link in links.items()}


def cluster_rues(rues: Sequence[RueState], num_clusters: int, seed: int = 0) -> List[Cluster]:
    """
    Group RUEs by proximity with seeded k-means.

    Cluster ids follow the order in which clusters first appear in the RUE sequence.

    Args:
        rues (Sequence[RueState]): RUEs to group.
        num_clusters (int): Number of clusters (1 <= num_clusters <= len(rues)).
        seed (int): Initialization seed.

    Returns:
        List[Cluster]: Clusters ordered by cluster_id.

    Raises:
        ConfigurationError: If there are no RUEs or more clusters than RUEs.
    """
    if not rues:
        raise ConfigurationError("cannot cluster an empty RUE set")
    if not 1 <= num_clusters <= len(rues):
        raise ConfigurationError(f"num_clusters={num_clusters} must be between 1 and {len(rues)}")

    points = np.array([r.position for r in rues], dtype=float)
    labels = KMeans(n_clusters=num_clusters, n_init=10, random_state=seed).fit_predict(points)

    relabel: Dict[int, int] = {}
    for label in labels:
        relabel.setdefault(int(label), len(relabel))
    clusters = []
    for raw, cid in sorted(relabel.items(), key=lambda item: item[1]):
        idx = np.flatnonzero(labels == raw)
        members = tuple(rues[i].rue_id for i in idx)
        centroid = points[idx].mean(axis=0)
        clusters.append(Cluster(cluster_id=cid, member_rues=members,
                                centroid=(float(centroid[0]), float(centroid[1]))))
    return clusters


def gain_score(s: int, cluster: Cluster, gains_sq: Mapping[Tuple[int, int], float]) -> float:
    """Deferred-acceptance score: sum of |h_{s,u}|^2 over visible members."""
    return float(sum(gains_sq.get((s, u), 0.0) for u in cluster.member_rues))


def se_score(s: int, cluster: Cluster, link_se: Mapping[Tuple[int, int], float]) -> float:
    """Swap-phase score: sum of per-link spectrum efficiency over visible members."""
    return float(sum(link_se.get((s, u), 0.0) for u in cluster.member_rues))


def build_preferences(clusters: Sequence[Cluster], sat_ids: Sequence[int],
                      score: Callable[[int, Cluster], Optional[float]]) -> PreferenceLists:
    """
    Rank satellites for every cluster and clusters for every satellite.

    Args:
        clusters (Sequence[Cluster]): Clusters.
        sat_ids (Sequence[int]): Satellites.
        score (Callable): (sat_id, cluster) -> score, or None when no member sees the satellite.

    Returns:
        PreferenceLists: Lists sorted by descending score, ties by lowest id.
    """
    sat_scores: Dict[int, Dict[int, float]] = {s: {} for s in sat_ids}
    cluster_prefs: Dict[int, List[int]] = {}
    for c in clusters:
        scored = []
        for s in sat_ids:
            value = score(s, c)
            if value is not None:
                sat_scores[s][c.cluster_id] = value
                scored.append((-value, s))
        cluster_prefs[c.cluster_id] = [s for _, s in sorted(scored)]
    return PreferenceLists(cluster_prefs=cluster_prefs, sat_scores=sat_scores)


def gain_preferences(clusters: Sequence[Cluster], sat_ids: Sequence[int],
                     gains_sq: Mapping[Tuple[int, int], float]) -> PreferenceLists:
    """Preferences from the scalar channel gain; satellites seen by no member are left out."""
    def score(s, c):
        if not any((s, u) in gains_sq for u in c.member_rues):
            return None
        return gain_score(s, c, gains_sq)
    return build_preferences(clusters, sat_ids, score)


def deferred_acceptance(clusters: Sequence[Cluster], sats: Sequence[int], prefs: PreferenceLists,
                        capacities: Mapping[int, int]) -> Matching:
    """
    Build the initial matching.

    Every unmatched cluster proposes to the head of its list; each satellite considers its
    best proposer and accepts it while under capacity, otherwise that proposer strikes the
    satellite from its list. Each accept/reject decision counts as one proposal.

    Args:
        clusters (Sequence[Cluster]): Clusters.
        sats (Sequence[int]): Satellite ids.
        prefs (PreferenceLists): Preference lists.
        capacities (Mapping[int, int]): Q^s per satellite (missing means 0).

    Returns:
        Matching: The initial matching with its proposal count.
    """
    capacity = {s: int(capacities.get(s, 0)) for s in sats}
    mu = Matching.empty([c.cluster_id for c in clusters], capacity)
    remaining = {k: list(p) for k, p in prefs.cluster_prefs.items()}
    current = [c.cluster_id for c in clusters if remaining.get(c.cluster_id)]

    while current:
        proposals: Dict[int, List[int]] = {s: [] for s in sats}
        for k in current:
            proposals[remaining[k][0]].append(k)
        for s in sats:
            if not proposals[s]:
                continue
            scores = prefs.sat_scores.get(s, {})
            best = min(proposals[s], key=lambda k: (-scores.get(k, 0.0), k))
            mu.proposals += 1
            if len(mu.mu_sat[s]) < capacity[s]:
                mu.assign(best, s)
                current.remove(best)
            else:
                remaining[best].remove(s)
                if not remaining[best]:
                    current.remove(best)

    logger.debug("Deferred acceptance finished after %s decisions", mu.proposals)
    return mu


def _improves(before: Sequence[float], after: Sequence[float], tol: float) -> bool:
    return all(a >= b - tol for a, b in zip(after, before)) and any(a > b + tol for a, b in zip(after, before))


def find_swap_blocking_pair(mu: Matching, utilities: UtilityModel,
                            tol: float = STRICT_TOL) -> Optional[Tuple[int, int]]:
    """
    Find the first swap-blocking pair in lexicographic (i, j) order.

    A pair of clusters matched to distinct satellites n, m blocks when exchanging them leaves
    i, j, n and m no worse off and makes at least one strictly better.

    Args:
        mu (Matching): Current matching.
        utilities (UtilityModel): Utility model.
        tol (float): Tolerance for weak/strict comparisons.

    Returns:
        tuple or None: (i, j) or None when mu is two-sided exchange-stable.
    """
    matched = sorted(k for k, s in mu.mu_cluster.items() if s is not UNMATCHED)
    for a, i in enumerate(matched):
        for j in matched[a + 1:]:
            n, m = mu.mu_cluster[i], mu.mu_cluster[j]
            if n == m or not (utilities.is_admissible(i, m) and utilities.is_admissible(j, n)):
                continue
            swapped = mu.swapped(i, j)
            before = [utilities.cluster_utility(mu, i), utilities.cluster_utility(mu, j),
                      utilities.satellite_utility(mu, n), utilities.satellite_utility(mu, m)]
            after = [utilities.cluster_utility(swapped, i), utilities.cluster_utility(swapped, j),
                     utilities.satellite_utility(swapped, n), utilities.satellite_utility(swapped, m)]
            if _improves(before, after, tol):
                return i, j
    return None


def swap_refinement(mu0: Matching, utilities: UtilityModel, iteration_cap: Optional[int] = None) -> Matching:
    """
    Apply swap-blocking pairs until none remains.

    Args:
        mu0 (Matching): Initial matching (not modified).
        utilities (UtilityModel): Utility model.
        iteration_cap (int, optional): Maximum number of swaps; defaults to |K|^2 * |S|.

    Returns:
        Matching: An exchange-stable matching.

    Raises:
        MatchingError: If the cap is exceeded, which means the utilities keep changing.
    """
    cap = iteration_cap or max(1, len(mu0.mu_cluster) ** 2 * max(1, len(mu0.capacity)))
    mu = mu0.copy()
    while True:
        pair = find_swap_blocking_pair(mu, utilities)
        if pair is None:
            logger.debug("Swap refinement stable after %s swaps", mu.swaps)
            return mu
        if mu.swaps >= cap:
            raise MatchingError(f"swap refinement exceeded {cap} swaps; utilities are not settling")
        swaps = mu.swaps + 1
        mu = mu.swapped(*pair)
        mu.swaps = swaps


def to_association(mu: Matching, clusters, gains_sq: Mapping[Tuple[int, int], float],
                   n_beam: int) -> AssociationVector:
    """
    Turn a matching into an association vector.

    Each satellite walks its clusters in id order and hands its remaining beams to the
    strongest visible members (ties by lowest rue_id).

    Args:
        mu (Matching): The matching.
        clusters (Iterable[Cluster]): Clusters referenced by mu.
        gains_sq (Mapping): |h_{s,u}|^2 for visible links.
        n_beam (int): Beams per satellite.

    Returns:
        AssociationVector: The association.
    """
    by_id = {c.cluster_id: c for c in clusters}
    pairs = set()
    for s in sorted(mu.mu_sat):
        remaining = n_beam
        for k in sorted(mu.mu_sat[s]):
            members = [u for u in by_id[k].member_rues if (s, u) in gains_sq]
            members.sort(key=lambda u: (-gains_sq[(s, u)], u))
            chosen = members[:max(0, remaining)]
            pairs.update((s, u) for u in chosen)
            remaining -= len(chosen)
    return AssociationVector(frozenset(pairs))


def associate(clusters: Sequence[Cluster], links: Mapping[Tuple[int, int], LinkChannel],
              sat_ids: Sequence[int], rue_ids: Sequence[int], radio: RadioConfig, noise_power_lin: float,
              capacity: int, iteration_cap: Optional[int] = None) -> Tuple[Matching, AssociationVector]:
    """
    Run the full association: gain-based deferred acceptance, SE-based swap refinement and
    conversion to an association vector.

    Returns:
        tuple: (matching, association vector).
    """
    gains_sq = gain_squares(links)
    prefs = gain_preferences(clusters, sat_ids, gains_sq)
    mu0 = deferred_acceptance(clusters, sat_ids, prefs, {s: capacity for s in sat_ids})
    utilities = SpectrumUtilities(clusters, links, sat_ids, rue_ids, radio, noise_power_lin)
    try:
        mu = swap_refinement(mu0, utilities, iteration_cap)
    except MatchingError as e:
        logger.warning("Keeping the deferred-acceptance matching: %s", e)
        mu = mu0
    mu.validate()
    assoc = to_association(mu, clusters, gains_sq, radio.n_beam)
    assoc.validate(radio.n_beam)
    return mu, assoc


def total_utility(mu: Matching, utilities: UtilityModel) -> float:
    """Sum of cluster utilities."""
    return float(sum(utilities.cluster_utility(mu, k) for k in mu.mu_cluster))


def solve_instance(instance: MatchInstance) -> MatchResult:
    """
    Run deferred acceptance and swap refinement on a standalone instance.

    Gain scores rank satellites in the first phase; the swap phase uses fixed per-pair
    utilities (the gain scores when none are given).
    """
    clusters = [Cluster(cluster_id=k, member_rues=(), centroid=(0.0, 0.0)) for k in sorted(instance.gain_scores)]
    sat_ids = sorted(instance.capacities)
    prefs = build_preferences(clusters, sat_ids, lambda s, c: instance.gain_scores[c.cluster_id].get(s))
    mu0 = deferred_acceptance(clusters, sat_ids, prefs, instance.capacities)
    mu = swap_refinement(mu0, TableUtilities(instance.utilities or instance.gain_scores), instance.iteration_cap)
    mu.validate()
    return MatchResult(assignment=dict(sorted(mu.mu_cluster.items())), proposals=mu.proposals, swaps=mu.swaps)
