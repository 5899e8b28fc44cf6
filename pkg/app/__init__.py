"""
Flask application factory for the linear-SCM elicitation benchmark
"""
import logging
import os
import sys

from flask import Flask


def configure_logging(level):
    """Service loggers write to stderr; stdout stays free for command output"""
    level = getattr(logging, str(level).upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        stream=sys.stderr,
    )
    logging.getLogger().setLevel(level)


def create_app(config_object='config'):
    """
    Create and configure the Flask application

    Args:
        config_object: Configuration object to load

    Returns:
        Configured Flask app instance with the benchmark commands registered
    """
    app = Flask(__name__, template_folder='templates')

    # Load configuration
    app.config.from_object(config_object)
    configure_logging(app.config.get('LOG_LEVEL', 'INFO'))

    # Ensure the artifact directory exists
    os.makedirs(app.config['OUTPUT_DIR'], exist_ok=True)
    logging.getLogger(__name__).debug(f"📂 Output directory: {app.config['OUTPUT_DIR']}")

    # Register command blueprints
    from app.commands import benchmark
    app.register_blueprint(benchmark.bp)

    return app
