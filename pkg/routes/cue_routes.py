"""
Cue Routes - Emotion cue selection and prompt compilation
"""

from flask import Blueprint, current_app, jsonify, request

from services.cue_service import (
    SceneStructure, calibrate, compile_prompt, filter_bank, select_cues
)
from services.errors import EmoKgError
from services.retrieval_service import (
    RetrievalQuery, resolve_starts, resolve_targets, retrieve_subgraph
)

from .resources import get_resources

cue_bp = Blueprint('cues', __name__, url_prefix='/api/cues')


@cue_bp.route('/select', methods=['POST'])
def select():
    """
    Score, filter and compile cues for one image.
    Body: {"image_path": "...", "targets": [...], "scene": {...}, "lam": 0.5, "K": 15, "tau": 0.6}
    """
    body = request.get_json(silent=True) or {}
    image_path = body.get('image_path', '').strip()
    targets = body.get('targets') or []
    if not image_path or not targets or not body.get('scene'):
        return jsonify({'error': 'image_path, targets and scene are required'}), 400

    settings = current_app.config['PIPELINE'].cues
    try:
        resources = get_resources()
        scene = SceneStructure.from_dict(body['scene'])
        graph = resources.graph
        query = RetrievalQuery(
            tuple(resolve_starts(graph, scene.start_names)),
            tuple(resolve_targets(graph, targets)),
            current_app.config['PIPELINE'].kg.k,
        )
        subgraph = retrieve_subgraph(graph, query)
        embedding = resources.provider.embed_image(image_path)
        pool = select_cues(graph, subgraph, embedding, targets,
                           float(body.get('lam', settings.lam)), int(body.get('K', settings.K)),
                           intensity=resources.intensity, lexicon=resources.lexicon)
        pool = calibrate(pool, scene, resources.rules)
        bank = filter_bank(pool, targets, float(body.get('tau', settings.tau)), scene, resources.rules)
        prompt = compile_prompt(bank, scene, targets, settings.mode, resources.lmm_client)
    except (EmoKgError, OSError, ValueError, KeyError) as e:
        current_app.logger.warning("Cue selection failed: %s", e)
        return jsonify({'error': str(e)}), 400

    return jsonify({
        'pool': [c.to_dict() for c in pool.cues],
        'bank': bank.to_dict(),
        'prompt': prompt.to_dict(),
    })
