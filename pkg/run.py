#!/usr/bin/env python3
"""
EARCP experiment lab command-line entry point

    python run.py run experiments/regime_switch.toml
    python run.py sweep experiments/ablation_grid.toml --quiet
"""

from earcp_lab.cli import cli

if __name__ == "__main__":
    cli()
