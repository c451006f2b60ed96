from .planar import PlanarConfig, PlanarTransferEnv, make_planar_transfer
from .chainworld import (ChainWorldConfig, ChainWorldEnv, make_chain_world,
                         conflict_chain_config, dp_optimal_task_success,
                         dp_optimal_values, dp_random_policy_values,
                         p_map_value)
from .demos import (Demonstration, collect_demonstrations,
                    collect_full_task_demos, load_demos, save_demos,
                    scripted_controller)

__all__ = [
    "PlanarConfig", "PlanarTransferEnv", "make_planar_transfer",
    "ChainWorldConfig", "ChainWorldEnv", "make_chain_world",
    "conflict_chain_config", "dp_optimal_task_success", "dp_optimal_values",
    "dp_random_policy_values", "p_map_value",
    "Demonstration", "collect_demonstrations", "collect_full_task_demos",
    "load_demos", "save_demos", "scripted_controller",
]
