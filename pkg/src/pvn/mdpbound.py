"""Finite-horizon tabular MDPs and an empirical checker for the KL visitation bound.

Conventions: rewards are collected at t = 1..H with d_1 = start distribution,
so V^pi(s) = sum_t E[R(s_t)] = H * <d(.; pi, delta_s), R>. Policies are
time-indexed tables of shape [H, S, A].
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

INFINITE = math.inf
ROW_TOL = 1e-9
VALUE_TOL = 1e-9


class ConsistencyError(AssertionError):
    """Two independent computations of the same quantity disagree."""


@dataclass
class TabularMDP:
    reward: np.ndarray  # [S]
    transition: np.ndarray  # [S, A, S]
    horizon: int
    mu: np.ndarray  # [S]
    r_max: float = 1.0

    def __post_init__(self):
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        s = self.n_states
        if self.transition.shape[0] != s or self.transition.shape[2] != s:
            raise ValueError(f"transition shape {self.transition.shape} inconsistent with {s} states")
        if np.any(self.transition < 0) or np.abs(self.transition.sum(-1) - 1).max() > ROW_TOL:
            raise ValueError("transition rows must be distributions")
        if np.any(self.reward < 0) or np.any(self.reward > self.r_max + 1e-12):
            raise ValueError("rewards must lie in [0, R_max]")
        if self.mu.shape != (s,) or abs(self.mu.sum() - 1) > ROW_TOL or np.any(self.mu < 0):
            raise ValueError("mu must be a distribution over states")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def n_states(self):
        return self.reward.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]


def check_policy(mdp: TabularMDP, pi):
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (mdp.horizon, mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {pi.shape} != {(mdp.horizon, mdp.n_states, mdp.n_actions)}")
    if np.any(pi < 0) or np.abs(pi.sum(-1) - 1).max() > ROW_TOL:
        raise ValueError("policy rows must be distributions")
    return pi


def state_transition(mdp, pi, t):
    """P_t[s, s'] = sum_a pi(a|s,t) T(s'|s,a)."""
    return np.einsum("sa,sap->sp", pi[t], mdp.transition)


def visitation_slices(mdp: TabularMDP, pi, mu=None):
    """[H, S] array of d_t for t = 1..H."""
    pi = check_policy(mdp, pi)
    d = np.asarray(mdp.mu if mu is None else mu, dtype=np.float64)
    out = np.empty((mdp.horizon, mdp.n_states))
    for t in range(mdp.horizon):
        out[t] = d
        d = d @ state_transition(mdp, pi, t)
    return out


def visitation_distribution(mdp: TabularMDP, pi, mu=None):
    return visitation_slices(mdp, pi, mu).mean(axis=0)


def abstract_visitation(d, phi, n_abstract=None):
    phi = np.asarray(phi, dtype=np.int64)
    n_abstract = int(phi.max()) + 1 if n_abstract is None else n_abstract
    return np.bincount(phi, weights=np.asarray(d, dtype=np.float64), minlength=n_abstract)


def delta(s, n):
    e = np.zeros(n)
    e[s] = 1.0
    return e


def value_occupancy(mdp, pi, s):
    return mdp.horizon * float(visitation_distribution(mdp, pi, delta(s, mdp.n_states)) @ mdp.reward)


def value_backward(mdp, pi):
    """Backward induction; returns V_1 for every start state."""
    pi = check_policy(mdp, pi)
    v = np.zeros(mdp.n_states)
    for t in range(mdp.horizon - 1, -1, -1):
        q = mdp.reward[:, None] + mdp.transition @ v
        v = (pi[t] * q).sum(-1)
    return v


def policy_value(mdp, pi, s):
    """V^pi(s) via the occupancy identity, cross-checked against backward induction."""
    occ = value_occupancy(mdp, pi, s)
    bi = value_backward(mdp, pi)[s]
    if abs(occ - bi) > VALUE_TOL:
        raise ConsistencyError(f"occupancy value {occ!r} != backward induction {bi!r}")
    return occ


def optimal_policy(mdp: TabularMDP):
    """Deterministic optimal policy; ties go to the lowest action id."""
    pi = np.zeros((mdp.horizon, mdp.n_states, mdp.n_actions))
    v = np.zeros(mdp.n_states)
    for t in range(mdp.horizon - 1, -1, -1):
        q = mdp.reward[:, None] + mdp.transition @ v
        best = q.max(-1, keepdims=True)
        a = np.argmax(q >= best - 1e-12, axis=-1)
        pi[t, np.arange(mdp.n_states), a] = 1.0
        v = q[np.arange(mdp.n_states), a]
    return pi


def kl_discrete(p, q):
    """Exact KL(p || q) in nats; INFINITE when p puts mass where q has none."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = p > 0
    if np.any(q[m] <= 0):
        return INFINITE
    return max(float(np.sum(p[m] * np.log(p[m] / q[m]))), 0.0)


def abstraction_alpha(reward, phi, r_tilde):
    return float(np.max(np.abs(np.asarray(reward) - np.asarray(r_tilde)[np.asarray(phi)])))


def mean_abstract_reward(reward, phi, n_abstract):
    """R~ = mean of R over each preimage; zero for empty preimages."""
    phi = np.asarray(phi)
    tot = np.bincount(phi, weights=reward, minlength=n_abstract)
    cnt = np.bincount(phi, minlength=n_abstract)
    return np.where(cnt > 0, tot / np.maximum(cnt, 1), 0.0)


def theorem_rhs(h, r_max, alpha, eps, eta):
    if math.isinf(eps) or math.isinf(eta):
        return INFINITE
    return h * (r_max + alpha) * (math.sqrt(2 * eps) + math.sqrt(2 * eta))


def corrected_rhs(h, r_max, alpha, eps, eta):
    """Adds H * alpha * ||d* - d^pi||_1 <= 2 H alpha, the reward-mismatch term on concrete states."""
    return theorem_rhs(h, r_max, alpha, eps, eta) + 2 * h * alpha


@dataclass
class BoundRecord:
    eps: float
    eta: float
    alpha: float
    lhs: float
    rhs: float
    holds: bool
    corrected_rhs: float
    corrected_holds: bool
    worst_state: int
    mu_eps: float
    mu_eta: float
    mu_lhs: float
    mu_rhs: float
    mu_holds: bool
    value_error: float

    @property
    def finite(self):
        return math.isfinite(self.eps) and math.isfinite(self.eta)

    def to_json(self, **extra):
        rec = {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in asdict(self).items()}
        rec.update(extra)
        return json.dumps(rec, sort_keys=True)


def check_bound(mdp: TabularMDP, phi, r_tilde, pi_star, pi, d_hat, d_hat_mu=None) -> BoundRecord:
    """Evaluate the bound per start state (delta_s) and for the start distribution mu.

    ``d_hat`` is either one abstract distribution shared by all start states or
    an [S, S~] array with one prediction per start state. The delta_s check
    holds when V*(s) - V^pi(s) <= rhs(eps_s, eta_s) + 1e-9 for every s; a
    start state with infinite eps or eta satisfies it trivially. ``lhs`` and
    ``rhs`` report the state with the largest violation margin.
    """
    phi = np.asarray(phi, dtype=np.int64)
    r_tilde = np.asarray(r_tilde, dtype=np.float64)
    if np.any(r_tilde < 0):
        raise ValueError("abstract rewards must be nonnegative")
    n_abs = len(r_tilde)
    if phi.shape != (mdp.n_states,) or phi.min() < 0 or phi.max() >= n_abs:
        raise ValueError("phi must map every state to an abstract id")
    alpha = abstraction_alpha(mdp.reward, phi, r_tilde)
    d_hat = np.asarray(d_hat, dtype=np.float64)
    if d_hat.ndim == 1:
        d_hat = np.broadcast_to(d_hat, (mdp.n_states, n_abs))
    h, rm = mdp.horizon, mdp.r_max
    v_star_bi, v_pi_bi = value_backward(mdp, pi_star), value_backward(mdp, pi)
    worst = None
    ok = ok_c = True
    verr = 0.0
    for s in range(mdp.n_states):
        e = delta(s, mdp.n_states)
        ds = visitation_distribution(mdp, pi_star, e)
        dp = visitation_distribution(mdp, pi, e)
        vs, vp = h * float(ds @ mdp.reward), h * float(dp @ mdp.reward)
        verr = max(verr, abs(vs - v_star_bi[s]), abs(vp - v_pi_bi[s]))
        eps = kl_discrete(abstract_visitation(ds, phi, n_abs), d_hat[s])
        eta = kl_discrete(d_hat[s], abstract_visitation(dp, phi, n_abs))
        lhs = vs - vp
        rhs = theorem_rhs(h, rm, alpha, eps, eta)
        crhs = corrected_rhs(h, rm, alpha, eps, eta)
        ok &= lhs <= rhs + 1e-9
        ok_c &= lhs <= crhs + 1e-9
        margin = lhs - rhs if math.isfinite(rhs) else -INFINITE
        if worst is None or margin > worst[0]:
            worst = (margin, s, eps, eta, lhs, rhs, crhs)
    if verr > VALUE_TOL:
        raise ConsistencyError(f"occupancy and backward-induction values differ by {verr:.3g}")
    _, ws, eps, eta, lhs, rhs, crhs = worst
    # mu reading: one start distribution, one prediction
    dm_hat = d_hat[0] if d_hat_mu is None else np.asarray(d_hat_mu, dtype=np.float64)
    dsm = visitation_distribution(mdp, pi_star)
    dpm = visitation_distribution(mdp, pi)
    mu_eps = kl_discrete(abstract_visitation(dsm, phi, n_abs), dm_hat)
    mu_eta = kl_discrete(dm_hat, abstract_visitation(dpm, phi, n_abs))
    mu_lhs = h * float((dsm - dpm) @ mdp.reward)
    mu_rhs = theorem_rhs(h, rm, alpha, mu_eps, mu_eta)
    return BoundRecord(eps, eta, alpha, lhs, rhs, bool(ok), crhs, bool(ok_c), ws, mu_eps, mu_eta, mu_lhs, mu_rhs,
                       bool(mu_lhs <= mu_rhs + 1e-9), verr)


# -- generators -------------------------------------------------------------------------------


def random_mdp(rng, n_states=6, n_actions=3, horizon=5, r_max=1.0):
    t = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    return TabularMDP(rng.uniform(0, r_max, n_states), t, horizon, rng.dirichlet(np.ones(n_states)), r_max)


def random_policy(rng, mdp):
    return rng.dirichlet(np.ones(mdp.n_actions), size=(mdp.horizon, mdp.n_states))


def random_partition(rng, n_states):
    """Random surjective phi onto 1..S abstract states."""
    k = int(rng.integers(1, n_states + 1))
    _, phi = np.unique(rng.integers(0, k, n_states), return_inverse=True)
    return phi.astype(np.int64), int(phi.max()) + 1


def perturb(rng, d, strength):
    noise = rng.dirichlet(np.ones(len(d)))
    return (1 - strength) * d + strength * noise


@dataclass
class Trial:
    mdp: TabularMDP
    phi: np.ndarray
    r_tilde: np.ndarray
    pi: np.ndarray
    d_hat: np.ndarray
    kind: str


def _predicted(mdp, pi_star, phi, n_abs, rng, strength):
    rows = []
    for s in range(mdp.n_states):
        d = abstract_visitation(visitation_distribution(mdp, pi_star, delta(s, mdp.n_states)), phi, n_abs)
        rows.append(perturb(rng, d, strength) if strength > 0 else d)
    return np.array(rows)


def random_trial(rng, n_states=6, n_actions=3, horizon=5):
    mdp = random_mdp(rng, n_states, n_actions, horizon)
    phi, k = random_partition(rng, n_states)
    r_tilde = mean_abstract_reward(mdp.reward, phi, k)
    kind = "mean"
    if rng.random() < 0.5:
        # adversarial: shift R~ by up to a chosen alpha
        r_tilde = np.maximum(r_tilde + rng.uniform(-0.3, 0.3, k), 0.0)
        kind = "perturbed"
    pi_star = optimal_policy(mdp)
    d_hat = _predicted(mdp, pi_star, phi, k, rng, float(rng.uniform(0, 0.5)))
    return Trial(mdp, phi, r_tilde, random_policy(rng, mdp), d_hat, kind)


def _chain(n, horizon, reward, n_actions=2, absorbing=False):
    t = np.zeros((n, n_actions, n))
    for s in range(n):
        t[s, 0, min(s + 1, n - 1)] = 1.0
        for a in range(1, n_actions):
            t[s, a, s] = 1.0
    if absorbing:
        t[n - 1] = 0.0
        t[n - 1, :, n - 1] = 1.0
    return TabularMDP(np.asarray(reward, dtype=np.float64), t, horizon, delta(0, n))


def corner_trials(rng, count=100):
    """Hand-shaped families: deterministic chains, absorbing states, coarse abstractions with alpha > 0."""
    out = []
    i = 0
    while len(out) < count:
        fam = i % 5
        n = 2 + (i // 5) % 5
        h = 1 + (i // 25) % 5
        if fam == 0:  # deterministic chain, identity abstraction, exact prediction, stay-policy
            r = np.linspace(0, 1, n)
            mdp = _chain(n, h, r)
            phi, k = np.arange(n), n
            pi = np.zeros((h, n, 2))
            pi[..., 1] = 1.0
            strength = 0.0
        elif fam == 1:  # absorbing goal state, random stochastic policy
            r = np.zeros(n)
            r[-1] = 1.0
            mdp = _chain(n, h, r, n_actions=3, absorbing=True)
            phi, k = np.arange(n), n
            pi = random_policy(rng, mdp)
            strength = 0.2
        elif fam == 2:  # everything collapsed to one abstract state
            mdp = _chain(n, h, rng.uniform(0, 1, n))
            phi, k = np.zeros(n, dtype=np.int64), 1
            pi = random_policy(rng, mdp)
            strength = 0.0
        elif fam == 3:  # pairs of states merged, alpha > 0
            mdp = random_mdp(rng, n, 3, h)
            phi = np.arange(n) // 2
            k = int(phi.max()) + 1
            pi = random_policy(rng, mdp)
            strength = 0.1
        else:  # pi = pi*, exact prediction
            mdp = random_mdp(rng, n, 3, h)
            phi, k = random_partition(rng, n)
            pi = optimal_policy(mdp)
            strength = 0.0
        r_tilde = mean_abstract_reward(mdp.reward, phi, k)
        pi_star = optimal_policy(mdp)
        d_hat = _predicted(mdp, pi_star, phi, k, rng, strength)
        out.append(Trial(mdp, np.asarray(phi), r_tilde, pi, d_hat, f"corner{fam}"))
        i += 1
    return out


@dataclass
class SweepSummary:
    trials: int
    finite: int
    violations: int
    mu_violations: int
    corrected_violations: int
    max_ratio: float
    max_value_error: float

    @property
    def passed(self):
        return self.violations == 0


def verify(trials=10000, seed=7, corners=100, sink=None):
    """Random sweep plus corner cases; ``sink`` receives one JSON line per trial."""
    rng = np.random.default_rng(seed)
    jobs = [(i, random_trial(np.random.default_rng([seed, i]))) for i in range(trials)]
    jobs += [(trials + j, t) for j, t in enumerate(corner_trials(rng, corners))]
    finite = viol = mu_viol = c_viol = 0
    max_ratio = 0.0
    max_verr = 0.0
    for idx, tr in jobs:
        rec = check_bound(tr.mdp, tr.phi, tr.r_tilde, optimal_policy(tr.mdp), tr.pi, tr.d_hat)
        max_verr = max(max_verr, rec.value_error)
        if rec.finite:
            finite += 1
            viol += not rec.holds
            c_viol += not rec.corrected_holds
            if rec.rhs > 0:
                max_ratio = max(max_ratio, rec.lhs / rec.rhs)
            elif rec.lhs > 1e-9:
                max_ratio = INFINITE
        if math.isfinite(rec.mu_eps) and math.isfinite(rec.mu_eta):
            mu_viol += not rec.mu_holds
        if sink is not None:
            sink(rec.to_json(trial=idx, seed=seed, kind=tr.kind))
    return SweepSummary(len(jobs), finite, viol, mu_viol, c_viol, max_ratio, max_verr)


def counterexample():
    """Two states, one abstract state, R = [0, 1], R~ = 0.5, H = 2: eps = eta = 0 but V* - V^pi = 1."""
    t = np.zeros((2, 2, 2))
    t[0, 0, 1] = t[0, 1, 0] = 1.0
    t[1, :, 1] = 1.0
    mdp = TabularMDP(np.array([0.0, 1.0]), t, 2, delta(0, 2))
    phi = np.zeros(2, dtype=np.int64)
    pi = np.zeros((2, 2, 2))
    pi[..., 1] = 1.0
    return Trial(mdp, phi, np.array([0.5]), pi, np.array([1.0]), "counterexample")
