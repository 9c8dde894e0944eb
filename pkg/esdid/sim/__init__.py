"""Monte Carlo coverage harness."""
