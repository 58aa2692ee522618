"""
Main Flask application entry point for the emotion editing pipeline.

This module provides the application factory pattern for creating Flask app instances.
JSON endpoints live in the routes package; CLI verbs live in the commands package
and run with `flask --app app <group> <command>`.
"""

import logging
from typing import Optional

from flask import Flask

from commands import register_commands
from config import PipelineConfig, load_config
from routes import register_blueprints


def create_app(config: Optional[PipelineConfig] = None):
    """
    Application factory function to create and configure Flask app.

    Args:
        config: pipeline configuration (defaults to $EMOKG_CONFIG or built-in defaults)

    Returns:
        Flask: Configured Flask application instance
    """
    app = Flask(__name__)
    app.config["PIPELINE"] = config if config is not None else load_config()

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    # Register all route blueprints and command groups
    register_blueprints(app)
    register_commands(app)

    return app


if __name__ == '__main__':
    app = create_app()
    app.run(debug=True, host='0.0.0.0', port=5000)
