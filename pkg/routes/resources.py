"""
Shared pipeline resources for request handlers.
"""

from flask import current_app

from services.pipeline_service import PipelineResources, build_resources


def get_resources() -> PipelineResources:
    """Build the shared pipeline resources on first use and keep them on the app."""
    resources = current_app.extensions.get("emokg")
    if resources is None:
        config = current_app.config["PIPELINE"]
        config.validate()
        resources = build_resources(config)
        current_app.extensions["emokg"] = resources
    return resources
