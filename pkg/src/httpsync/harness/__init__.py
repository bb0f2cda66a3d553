"""Chains, scenarios, the discrepancy oracle and the benchmark driver."""
