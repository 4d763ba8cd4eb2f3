__all__ = ["acceptance", "evaluator", "experiments", "pipeline", "reports", "stats", "trainer"]
