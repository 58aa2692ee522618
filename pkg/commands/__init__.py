"""
Commands Package - Register all click command groups
"""

from .kg_commands import kg_cli
from .era_commands import era_cli
from .cue_commands import cue_cli
from .edit_commands import edit_cli
from .eval_commands import eval_cli
from .pipeline_commands import pipeline_cli


def register_commands(app):
    """Register all command groups with the Flask app's CLI."""
    for group in (kg_cli, era_cli, cue_cli, edit_cli, eval_cli, pipeline_cli):
        app.cli.add_command(group)
