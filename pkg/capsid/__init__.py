from .services import evaluator, experiments, stats, trainer

__version__ = "0.1.0"

__all__ = ["evaluator", "experiments", "stats", "trainer", "__version__"]
