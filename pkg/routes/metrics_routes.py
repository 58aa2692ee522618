"""
Metrics Routes - Pointwise evaluation metrics
"""

from flask import Blueprint, jsonify, request

from services.errors import EmoKgError
from services.metrics_service import clip_i_prox, tea_distribution, tea_from_similarities

metrics_bp = Blueprint('metrics', __name__, url_prefix='/api/metrics')


@metrics_bp.route('/clip-prox')
def clip_prox():
    """Proximity score of a raw CLIP-I similarity, e.g. /api/metrics/clip-prox?d=0.8"""
    d = request.args.get('d', type=float)
    if d is None:
        return jsonify({'error': 'Query parameter d must be a number'}), 400
    try:
        return jsonify({'d': d, 'clip_i_prox': clip_i_prox(d)})
    except EmoKgError as e:
        return jsonify({'error': str(e)}), 400


@metrics_bp.route('/tea', methods=['POST'])
def tea():
    """
    Target emotion activation from precomputed similarities.
    Body: {"similarities": [...], "target_index": 1}
    """
    body = request.get_json(silent=True) or {}
    similarities = body.get('similarities')
    target_index = body.get('target_index')
    if not similarities or not isinstance(target_index, int):
        return jsonify({'error': 'similarities and an integer target_index are required'}), 400
    try:
        return jsonify({
            'tea': tea_from_similarities(similarities, target_index),
            'distribution': tea_distribution(similarities).tolist(),
        })
    except (EmoKgError, TypeError, ValueError) as e:
        return jsonify({'error': str(e)}), 400
