from .grammar import (
    ParallelGroup, Serial, StructuredResponse, check_structure, has_tag, parse_tagged, render,
    serialize,
)
from .judge import FAIL, PASS, JudgeClient, JudgeRequest, MockJudge, Stage
from .pipeline import (
    CuratedSample, JudgeFail, Pass, PipelineConfig, PipelineReport, Sample, StructuralFail,
    ValidationReport, degenerate, degenerate_many, judged_stage, run_pipeline, select_preferred,
    serial_twin, validate_integrity,
)
from .training import (
    TrainingExample, branch_contiguous_order, emit_training_layout, layout_from_response,
    teacher_forced,
)
