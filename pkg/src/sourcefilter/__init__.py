"""Differentiable all-pole source-filter analysis, formant manipulation and resynthesis."""

from .allpole import (AllPoleFrameSet, analyze_envelopes, envelope_spectrum, filter_stft,
                      inverse_filter, levinson_backward, levinson_durbin, levinson_forward,
                      reparameterize)
from .dsp import AudioBuffer, ComplexSpectrogram, StftConfig, istft, snr_db, stft
from .errors import (DataError, FormantCollisionError, NumericalError, SourceFilterError,
                     UnstableFilterError, UsageError)
from .features import FeatureTrack, NormalizationSpec, denormalize, extract_features, normalize
from .formants import durand_kerner, extract_formant_track, relocate_formants, roots_to_formants
from .gradient import GradientTape, LossSpec, finite_diff_check, fit_envelope, fit_excitation
from .pipeline import (ManipulationSpec, PipelineConfig, copy_synthesis, eval_manipulation,
                       make_test_corpus, manipulate, scan_normalization)

__version__ = "0.1.0"
