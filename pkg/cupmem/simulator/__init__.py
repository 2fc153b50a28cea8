"""Deterministic scenario generation and the scoring harness."""
