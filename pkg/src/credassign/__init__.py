"""Pluggable credit assignment (backprop, feedback alignment, sign-concordant
feedback) for a small CIFAR-10 conv net, with alignment and representation
analysis tools."""

from .feedback import FeedbackRule, effective_feedback
from .network import Network, cifar_network, build_network, init_network

__version__ = "0.1.0"

__all__ = ["FeedbackRule", "Network", "cifar_network", "build_network",
           "effective_feedback", "init_network", "__version__"]
