"""
Routes Package - Initialize all route blueprints
"""

from .kg_routes import kg_bp
from .cue_routes import cue_bp
from .metrics_routes import metrics_bp
from .pipeline_routes import pipeline_bp


def register_blueprints(app):
    """Register all route blueprints with the Flask app."""
    app.register_blueprint(kg_bp)
    app.register_blueprint(cue_bp)
    app.register_blueprint(metrics_bp)
    app.register_blueprint(pipeline_bp)
