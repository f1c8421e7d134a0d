"""
Experiment runner for the twinpress library: config loading, the twin
lifecycle pipeline, the attack grid, the caching experiment and the CLI.
"""
