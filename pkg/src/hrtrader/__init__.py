"""Hierarchical reinforcement-learning trading engine.

A PPO high-level controller picks buy/sell/hold per stock, a DDPG low-level
controller sizes the trades, and ``trainer.HrtTrainer`` trains them in phases.
"""

from .backtest import BacktestReport, StrategyKind, compute_metrics, run_backtest
from .ddpg import DdpgAgent, DdpgConfig
from .env import EnvConfig, TradingEnv
from .marketdata import MarketFrame, SignalPanel, SyntheticMarketSpec, generate_synthetic, load_csv
from .ppo import HlcAgent, PpoConfig
from .trainer import HrtTrainer, TrainSchedule

__version__ = "0.1.0"

__all__ = [
    "BacktestReport",
    "DdpgAgent",
    "DdpgConfig",
    "EnvConfig",
    "HlcAgent",
    "HrtTrainer",
    "MarketFrame",
    "PpoConfig",
    "SignalPanel",
    "StrategyKind",
    "SyntheticMarketSpec",
    "TradingEnv",
    "TrainSchedule",
    "compute_metrics",
    "generate_synthetic",
    "load_csv",
    "run_backtest",
]
