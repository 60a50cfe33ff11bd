from .model import MUSIC_DIM, NetworkConfig, VelocityNet, init_params
from .ssm import discretize, selective_scan

__all__ = ["MUSIC_DIM", "NetworkConfig", "VelocityNet", "discretize", "init_params", "selective_scan"]
