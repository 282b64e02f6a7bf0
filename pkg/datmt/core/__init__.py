"""Core modules for datmt"""

from .generation import DemonstrationPair, LanguagePair, build_demonstrations
from .mmr import FilterConfig, mmr_select
from .pipeline import Mode, PipelineConfig, run_batch, translate
from .pool import DemonstrationPool
from .textngram import alpha, tokenize

__all__ = [
    'tokenize', 'alpha',
    'FilterConfig', 'mmr_select',
    'DemonstrationPair', 'LanguagePair', 'build_demonstrations',
    'DemonstrationPool',
    'Mode', 'PipelineConfig', 'translate', 'run_batch',
]
