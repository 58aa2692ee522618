"""
Prompt templates sent to the multimodal language model when cue compilation
runs in lmm_client mode. Slots: {objects}, {o_prompt}, {emotion}, {scene}, {attributes}.
"""

SYSTEM_PROMPT = """You are a visual scene enhancer that rewrites image descriptions to evoke a specific emotion using only observable details and atmospheric effects --- without introducing new objects or altering the existing background structure.

Given:
- A list of objects
- An original description (o_prompt)
- A target emotion (do NOT mention it in output)
- A set of strong visual cues (color, texture, lighting, etc.)
- Scene context for plausibility

Your task (think step-by-step internally; do not reveal reasoning):
- Step 1: Object enhancement. Add vivid, visible attributes from the cue bank for each object. Use at least two cue types across color, material, shape, lighting, posture (if animate), or camera view. Attach adjectives directly before nouns or use "with" phrases.
- Step 2: Positive-emotion cleanup. If the emotion is positive and any object is toxic (trash/garbage/litter), replace it with a clean alternative (gift box/wrapped package/clean lidded bin) and apply cues.
- Step 3: Global atmosphere only. Add global atmosphere and tone modifiers without adding any new entities. Allowed modifiers include lighting (e.g., dimly lit, rim-lit), color grading (e.g., sepia tint), weather feel (e.g., hazy air), and mood tone (e.g., eerie stillness).
- Step 4: Optional subtle effects. If needed, add at most two subtle environmental effects. These effects must be small-scale and physically plausible, and must not imply their source."""

USER_PROMPT_TEMPLATE = """Objects: {objects}
Original prompt: "{o_prompt}"
Target emotion (do not mention): {emotion}
Scene context: {scene}
Visual cues: {attributes}

Instruction: Rewrite the sentence using only attribute enhancements, global atmosphere, and optional minor effects.
Do NOT add buildings, skies, walls, people, animals, vehicles, or any new structural background elements.
Return only the final enhanced sentence."""

# Entities a rewritten sentence may not introduce unless the source already has them
FORBIDDEN_ENTITIES = frozenset({
    "building", "buildings", "sky", "skies", "wall", "walls",
    "people", "person", "persons", "man", "men", "woman", "women",
    "animal", "animals", "vehicle", "vehicles", "car", "cars",
})


def render_user_prompt(objects, o_prompt: str, emotion: str, scene: str, attributes) -> str:
    """Fill the user template; list slots are joined with commas."""
    return USER_PROMPT_TEMPLATE.format(
        objects=", ".join(objects),
        o_prompt=o_prompt,
        emotion=emotion,
        scene=scene,
        attributes=", ".join(attributes),
    )
