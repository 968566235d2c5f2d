"""Hierarchical robust locomotion on a planar biped.

A goal-tracking policy (PPO + adversarial motion prior) and a safety-recovery
policy (trained under an extreme-case uncertainty set with a zero-moment-point
feasibility constraint) are coordinated by a Double-DQN selector.  See
README.md for the tour.
"""

__version__ = "0.1.0"

__all__ = ["core", "physics", "stability", "net", "imitation", "rl",
           "estimator", "selector", "evalharness", "__version__"]
