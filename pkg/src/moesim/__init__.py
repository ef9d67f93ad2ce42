"""Trace-driven simulator for CPU-GPU collaborative MoE inference."""
