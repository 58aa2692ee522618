"""
Knowledge Graph Routes - Reasoning path queries
"""

from flask import Blueprint, current_app, jsonify, request

from services.errors import EmoKgError
from services.retrieval_service import (
    RetrievalQuery, resolve_starts, resolve_targets, retrieve_subgraph, subgraph_to_dict
)

from .resources import get_resources

kg_bp = Blueprint('kg', __name__, url_prefix='/api/kg')


@kg_bp.route('/query', methods=['POST'])
def query_subgraph():
    """
    Retrieve the reasoning-path subgraph from scene/object names to target emotions.
    Body: {"starts": [...], "targets": [...], "k": 5}
    """
    body = request.get_json(silent=True) or {}
    starts = body.get('starts') or []
    targets = body.get('targets') or []
    if not starts or not targets:
        return jsonify({'error': 'Both starts and targets are required'}), 400

    try:
        graph = get_resources().graph
        k = int(body.get('k', current_app.config['PIPELINE'].kg.k))
        query = RetrievalQuery(
            tuple(resolve_starts(graph, starts)), tuple(resolve_targets(graph, targets)), k
        )
        subgraph = retrieve_subgraph(graph, query)
    except (EmoKgError, ValueError) as e:
        return jsonify({'error': str(e)}), 400

    return jsonify({
        'starts': list(query.starts),
        'targets': list(query.targets),
        'count': len(subgraph),
        'subgraph': subgraph_to_dict(graph, subgraph),
    })
