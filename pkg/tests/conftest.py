import numpy as np

from poplin.dynamics import TransitionDataset
from poplin.envs import Env


def collect_random_transitions(env: Env, n: int, seed: int) -> TransitionDataset:
    """Random-action rollouts, restarting episodes as they end."""
    data = TransitionDataset(env.spec.state_dim, env.spec.action_dim)
    rng = np.random.default_rng(seed)
    state = env.reset(seed)
    episode = 0
    while len(data) < n:
        action = rng.uniform(env.spec.action_low, env.spec.action_high)
        nxt, reward = env.step(state, action)
        data.add(state.observation, action, nxt.observation, reward)
        episode += nxt.done
        state = env.reset(seed + episode) if nxt.done else nxt
    return data
