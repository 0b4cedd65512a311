"""Self-contained CTR prediction engine: explicit multi-order feature
crosses weighted per channel by a selective-kernel attention layer, with
its own reverse-mode gradient engine, training loop and baselines."""

__version__ = "0.1.0"
