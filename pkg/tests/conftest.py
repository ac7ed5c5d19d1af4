import numpy as np
import pytest

from lpreg.objective import ObjectiveConfig, TokenBatch, batch_delta, entropy_gate_mask, make_proxy
from lpreg.policy import forward_batch, init_params, log_softmax_rows

VARIANT_CONFIGS = {
    "grpo": ObjectiveConfig(variant="grpo"),
    "grpo_entropy_bonus": ObjectiveConfig(variant="grpo_entropy_bonus"),
    "clip_higher": ObjectiveConfig(variant="clip_higher"),
    "top_entropy_8020": ObjectiveConfig(variant="top_entropy_8020"),
    "lp_reg_forward": ObjectiveConfig(),
    "lp_reg_reverse": ObjectiveConfig(kl_direction="reverse"),
    "lp_reg_wo_tau": ObjectiveConfig(filter_enabled=False),
    "lp_reg_highest_entropy": ObjectiveConfig(gate_basis="highest_entropy"),
}


def tiny_params(seed=0, vocab_size=12, attention=False):
    return init_params(vocab_size, context_window=3, embed_dim=4, hidden_size=6, seed=seed, attention=attention,
                       output_scale=1.0)


def synthetic_batch(params, seed=0, n_traj=6, max_len=5, rho=0.2, stale=0.3, config=None):
    """A token batch whose behavior probs are perturbed copies of the current ones (so r != 1)."""
    rng = np.random.default_rng(seed)
    V = params.vocab_size
    lengths = rng.integers(1, max_len + 1, size=n_traj)
    n = int(lengths.sum())
    contexts = rng.integers(0, V, size=(n, params.context_window))
    probs, _, ent = log_softmax_rows(forward_batch(params, contexts))
    tokens = np.array([rng.choice(V, p=p) for p in probs])
    cur = probs[np.arange(n), tokens]
    behavior = cur * np.exp(rng.uniform(-stale, stale, size=n))
    adv = rng.choice([-1.3, -0.4, 0.6, 1.1], size=n_traj)
    traj = np.repeat(np.arange(n_traj), lengths)
    tb = TokenBatch(contexts=contexts, tokens=tokens, behavior_probs=behavior, behavior_entropy=ent,
                    advantages=adv[traj], traj_index=traj, n_traj=n_traj,
                    delta=batch_delta(behavior, rho), entropy_selected=entropy_gate_mask(ent, rho),
                    behavior_dists=probs)
    cfg = config or ObjectiveConfig()
    tb.proxy = make_proxy(probs, cfg)
    return tb


@pytest.fixture
def params():
    return tiny_params()


def small_config(**dotted):
    """A seconds-scale experiment: no warm start, tiny batches and model."""
    from lpreg.config import ExperimentConfig
    base = {
        "model.warm_start.steps": 0, "model.hidden_size": 16, "model.embed_dim": 8, "model.context_window": 6,
        "model.output_scale": 1.0, "env.eval_size": 40, "schedule.rollout_batch": 4, "schedule.group_size": 4,
        "schedule.mini_batch": 2, "schedule.max_steps": 6, "schedule.max_response_len": 6,
        "schedule.eval_every": 3, "schedule.learning_rate": 0.1, "telemetry.probe_every": 2,
        "telemetry.subsample_rate": 0.3, "telemetry.plots": False,
    }
    base.update(dotted)
    return ExperimentConfig().replace(**base)
