"""
Pipeline Routes - Single-image runs and service health
"""

import os

from flask import Blueprint, current_app, jsonify, request

from database import create_run_dir
from services.cue_service import SceneStructure
from services.errors import EmoKgError, StageError
from services.pipeline_service import run_single

from .resources import get_resources

pipeline_bp = Blueprint('pipeline', __name__, url_prefix='/api')


@pipeline_bp.route('/health')
def health():
    """Report whether the configured graph loads."""
    try:
        graph = get_resources().graph
    except EmoKgError as e:
        return jsonify({'status': 'error', 'error': str(e)}), 503
    return jsonify({'status': 'ok', 'graph': graph.stats()})


@pipeline_bp.route('/pipeline/run', methods=['POST'])
def run():
    """
    Run the full pipeline for one image.
    Body: {"image_path": "...", "target_emotions": [...], "scene": {...}, "run_dsee": true}
    """
    body = request.get_json(silent=True) or {}
    image_path = body.get('image_path', '').strip()
    targets = body.get('target_emotions') or []
    if not image_path or not targets or not body.get('scene'):
        return jsonify({'error': 'image_path, target_emotions and scene are required'}), 400

    config = current_app.config['PIPELINE']
    try:
        scene = SceneStructure.from_dict(body['scene'])
        item_dir = create_run_dir(config.resolve(config.run.output_dir), body.get('run_name'))
        record = run_single(image_path, targets, config, scene, resources=get_resources(),
                            item_dir=item_dir, run_dsee=bool(body.get('run_dsee', True)))
    except StageError as e:
        current_app.logger.warning("Pipeline run failed in %s: %s", e.stage, e.cause)
        return jsonify({'error': str(e), 'stage': e.stage}), 400
    except (EmoKgError, KeyError, ValueError) as e:
        return jsonify({'error': str(e)}), 400

    return jsonify({'run_dir': os.path.abspath(item_dir), 'record': record.to_dict()})
