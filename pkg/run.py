"""
Linear-SCM Elicitation Benchmark - Command-Line Entry Point

Usage:
    python run.py validate fixtures/dags/cachexia_synthetic.json
    python run.py run fixtures/matrix.json
"""
from flask.cli import FlaskGroup

from app import create_app

cli = FlaskGroup(create_app=create_app, add_default_commands=False)


if __name__ == '__main__':
    cli()
