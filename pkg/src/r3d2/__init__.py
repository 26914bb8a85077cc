"""Text-based recurrent Q-learning for Hanabi across player counts."""

from r3d2.engine import GameConfig, GameState, legal_actions, new_game, observe
from r3d2.textenc import build_vocab, parse_action, render_action, render_observation

__version__ = "0.1.0"

__all__ = [
    "GameConfig",
    "GameState",
    "build_vocab",
    "legal_actions",
    "new_game",
    "observe",
    "parse_action",
    "render_action",
    "render_observation",
]
