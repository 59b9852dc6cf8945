"""Simulated environments and disturbance traces."""
