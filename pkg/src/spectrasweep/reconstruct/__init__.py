"""Reconstruction paths: a physics-based variational solver and a small trainable network."""

from .net import NetConfig, NetParams, load_params, net_backward, net_forward, net_init, save_params
from .train import AugmentConfig, augment, predict, train
from .variational import DivergenceError, ForwardOperator, SolverConfig, SolverResult, variational_reconstruct

__all__ = ["NetConfig", "NetParams", "load_params", "net_backward", "net_forward", "net_init", "save_params",
           "AugmentConfig", "augment", "predict", "train", "DivergenceError", "ForwardOperator",
           "SolverConfig", "SolverResult", "variational_reconstruct"]
