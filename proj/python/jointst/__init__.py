"""Python access to the joint speech-text pretraining core."""

from ._jst import (
    CharVocab,
    JstError,
    __version__,
    cer,
    ctc_brute_force,
    ctc_collapse,
    ctc_loss,
    edit_distance,
    grad_check_step,
    greedy_ctc_ids,
    language_weights,
    lr_schedule,
    mask_speech_frames,
    mask_text_spans,
    model_preset,
    model_preset_names,
    pretrain,
)

__all__ = [
    "CharVocab",
    "JstError",
    "__version__",
    "cer",
    "ctc_brute_force",
    "ctc_collapse",
    "ctc_loss",
    "edit_distance",
    "grad_check_step",
    "greedy_ctc_ids",
    "language_weights",
    "lr_schedule",
    "mask_speech_frames",
    "mask_text_spans",
    "model_preset",
    "model_preset_names",
    "pretrain",
]
