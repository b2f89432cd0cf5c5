"""Tool capability contracts, the per-turn pool, and the batch executor."""
