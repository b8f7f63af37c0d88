"""Sequential recommendation with aligned content modalities: a numpy
reimplementation of the SICSRec pipeline at desk scale."""

__version__ = "0.1.0"

from .align import ContentEncoderHead, encode_content, run_sft, select_pairs, sft_loss  # noqa: E402
from .data import Corpus, SynthSpec, leave_one_out_split, synth_generate  # noqa: E402
from .evaluate import EvalReport, evaluate  # noqa: E402
from .seqmodel import ModelConfig, SicsRecModel, load_checkpoint, save_checkpoint  # noqa: E402
from .training import TrainPlan, posttrain_stage2, pretrain_stage1, run_strategy, train_end2end  # noqa: E402

__all__ = [
    "ContentEncoderHead", "Corpus", "EvalReport", "ModelConfig", "SicsRecModel", "SynthSpec",
    "TrainPlan", "encode_content", "evaluate", "leave_one_out_split", "load_checkpoint",
    "posttrain_stage2", "pretrain_stage1", "run_sft", "run_strategy", "save_checkpoint",
    "select_pairs", "sft_loss", "synth_generate", "train_end2end",
]
