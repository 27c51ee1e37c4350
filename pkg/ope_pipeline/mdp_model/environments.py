# ope_pipeline/mdp_model/environments.py
"""
Benchmark environments: machine replacement (MRP) and healthcare management
(HMP), their data-collection-phase perturbations, and the default
target/behavior policy pairs used by the experiments.

Conventions not fixed by the source descriptions (flagged in every output):
- MRP d_0 is uniform over all 10 states; HMP d_0 is uniform over states 1-5.
- MRP Repair at R1/R2 copies the Do Nothing rows.
"""

from typing import Any, Dict, Tuple

import numpy as np

from ope_pipeline import settings
from ope_pipeline.errors import InputError
from ope_pipeline.mdp_model.mdp_core import FiniteMdp, Policy, optimal_policy, q_iteration_policy

# -------------------------------------------------------------------
# Machine replacement
# -------------------------------------------------------------------
MRP_STATES = ("S1", "S2", "S3", "S4", "S5", "S6", "S7", "S8", "R1", "R2")
MRP_ACTIONS = ("Repair", "DoNothing")
REPAIR, DO_NOTHING = 0, 1
R1, R2 = 8, 9

# -------------------------------------------------------------------
# Healthcare management
# -------------------------------------------------------------------
HMP_STATES = ("S1", "S2", "S3", "S4", "S5", "S6")
HMP_ACTIONS = ("DoNothing", "LowDrug", "HighDrug")
HMP_REWARDS = (10.0, 6.0, 2.0)
HMP_PROBS = ((0.4, 0.3, 0.3), (0.4, 0.2, 0.4), (0.4, 0.1, 0.5))
MORTALITY = 5

CONVENTION_FLAGS: Dict[str, str] = {
    "d0": "mrp: uniform over all states; hmp: uniform over S1-S5",
    "mrp_repair_at_repair_states": "copies Do Nothing rows",
    "hmp_behavior": "5 synchronous Q sweeps from zero, epsilon-greedy",
}


def machine_replacement(
    gamma: float = settings.DEFAULT_GAMMA, p: float = 0.2, q: float = 0.8, name: str = "mrp"
) -> FiniteMdp:
    S, A = len(MRP_STATES), len(MRP_ACTIONS)
    P = np.zeros((S, A, S))
    for i in range(7):
        P[i, DO_NOTHING, i] += p
        P[i, DO_NOTHING, i + 1] += q
    P[7, DO_NOTHING, 7] = 1.0
    P[R1, DO_NOTHING, R1] = 1.0
    P[R2, DO_NOTHING, R2] += p
    P[R2, DO_NOTHING, 0] += q
    for i in range(8):
        P[i, REPAIR, R1] += 0.1
        P[i, REPAIR, R2] += 0.6
        P[i, REPAIR, min(i + 1, 7)] += 0.3
    P[R1, REPAIR] = P[R1, DO_NOTHING]
    P[R2, REPAIR] = P[R2, DO_NOTHING]

    per_state = np.array([20.0] * 7 + [0.0, 18.0, 10.0])
    R = np.repeat(per_state[:, None], A, axis=1)
    d0 = np.full(S, 1.0 / S)
    return FiniteMdp(P, R, gamma, d0, name=name)


def healthcare_management(
    gamma: float = settings.DEFAULT_GAMMA,
    probs=HMP_PROBS,
    mortality_back: float = 0.0,
    name: str = "hmp",
) -> FiniteMdp:
    S, A = len(HMP_STATES), len(HMP_ACTIONS)
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    for a, (p1, p2, p3) in enumerate(probs):
        for i in range(MORTALITY):
            P[i, a, i] += p1
            P[i, a, i + 1] += p2
            P[i, a, max(0, i - 1)] += p3
            R[i, a] = HMP_REWARDS[a]
        P[MORTALITY, a, MORTALITY] = 1.0
    if mortality_back > 0:
        P[MORTALITY, 2, MORTALITY - 1] = mortality_back
        P[MORTALITY, 2, MORTALITY] = 1.0 - mortality_back
    d0 = np.zeros(S)
    d0[:MORTALITY] = 1.0 / MORTALITY
    return FiniteMdp(P, R, gamma, d0, name=name)


def perturbed_variant(env: str, gamma: float = settings.DEFAULT_GAMMA) -> FiniteMdp:
    """Data-collection-phase dynamics of the changing-environment study."""
    if env == "mrp":
        return machine_replacement(gamma, p=0.2 + 0.1, q=0.8 - 0.1, name="mrp-perturbed")
    if env == "hmp":
        shifted = tuple((p1 + 0.05, p2, p3 - 0.05) for p1, p2, p3 in HMP_PROBS)
        return healthcare_management(gamma, probs=shifted, mortality_back=0.05, name="hmp-perturbed")
    raise InputError(f"unknown environment '{env}' (expected mrp or hmp)")


ENVIRONMENTS = {"mrp": machine_replacement, "hmp": healthcare_management}


def make_env(env: str, gamma: float = settings.DEFAULT_GAMMA, perturbed: bool = False) -> FiniteMdp:
    if perturbed:
        return perturbed_variant(env, gamma)
    try:
        return ENVIRONMENTS[env](gamma)
    except KeyError:
        raise InputError(f"unknown environment '{env}' (expected one of {sorted(ENVIRONMENTS)})") from None


def behavior_policy(mdp: FiniteMdp, spec: str, epsilon: float = settings.DEFAULT_BEHAVIOR_EPSILON) -> Policy:
    """'uniform' or 'q<k>' (k synchronous Q sweeps + epsilon-greedy)."""
    if spec == "uniform":
        return Policy.uniform(mdp.n_states, mdp.n_actions)
    if spec.startswith("q") and spec[1:].isdigit():
        return q_iteration_policy(mdp, int(spec[1:]), epsilon)
    raise InputError(f"unknown behavior spec '{spec}' (expected 'uniform' or 'q<k>')")


def default_behavior_spec(env: str) -> str:
    return "uniform" if env == "mrp" else "q5"


def policy_pair(
    mdp: FiniteMdp, behavior_spec: str, epsilon: float = settings.DEFAULT_BEHAVIOR_EPSILON
) -> Tuple[Policy, Policy, float]:
    """
    (target, behavior, J*) with the target optimal for `mdp`. Behavior
    'target' logs data on-policy.
    """
    target, j_star = optimal_policy(mdp)
    if behavior_spec == "target":
        return target, target, j_star
    return target, behavior_policy(mdp, behavior_spec, epsilon), j_star


ENV_LABELS = {"mrp": (MRP_STATES, MRP_ACTIONS), "hmp": (HMP_STATES, HMP_ACTIONS)}


def describe_env(env: str, gamma: float = settings.DEFAULT_GAMMA, detail: bool = False) -> Dict[str, Any]:
    """JSON summary of a benchmark; `detail` adds the tables and the optimal policy."""
    mdp = make_env(env, gamma)
    states, actions = ENV_LABELS[env]
    out: Dict[str, Any] = {
        "env": env,
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "states": list(states),
        "actions": list(actions),
        "gamma": mdp.discount,
        "default_behavior": default_behavior_spec(env),
    }
    if detail:
        target, j_star = optimal_policy(mdp)
        out.update(
            transitions=mdp.transitions.tolist(),
            rewards=mdp.rewards.tolist(),
            initial_dist=mdp.initial_dist.tolist(),
            optimal_actions=target.greedy_actions().tolist(),
            optimal_value=j_star,
            perturbed_transitions=perturbed_variant(env, gamma).transitions.tolist(),
            conventions=CONVENTION_FLAGS,
        )
    return out
