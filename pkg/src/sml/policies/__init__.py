from __future__ import annotations

from .base import Policy, TeacherPolicy
from .scripted import (
    AlwaysWrongStudent,
    BisectStudent,
    FixedReply,
    FunctionPolicy,
    OracleStudent,
    RandomConsistentStudent,
    SequenceReply,
    TaskConditionalStudent,
    WaitForShardsStudent,
)
from .toy import ReferenceSnapshot, ToySoftmaxPolicy

__all__ = [
    "AlwaysWrongStudent", "BisectStudent", "FixedReply", "FunctionPolicy", "OracleStudent", "Policy",
    "RandomConsistentStudent", "ReferenceSnapshot", "SequenceReply", "TaskConditionalStudent", "TeacherPolicy",
    "ToySoftmaxPolicy", "WaitForShardsStudent",
]
