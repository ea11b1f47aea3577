"""Quadrotor pursuit-evasion simulator, self-play PPO trainer and matchup harness."""
__version__ = "0.1.0"
