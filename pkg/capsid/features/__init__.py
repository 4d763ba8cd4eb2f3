from capsid.features.archive import FeatureArchive, extract_archive, load_archive, save_archive
from capsid.features.mfcc import (
	FeatureConfig,
	FeatureMatrix,
	dct_cepstra,
	delta_features,
	extract_features,
	frame_signal,
	log_mel,
	mel_filterbank,
	power_spectrum,
	standardization_stats,
	standardize,
)
from capsid.features.signal import add_noise, resample, rms

__all__ = [
	"FeatureArchive",
	"FeatureConfig",
	"FeatureMatrix",
	"add_noise",
	"dct_cepstra",
	"delta_features",
	"extract_archive",
	"extract_features",
	"frame_signal",
	"load_archive",
	"log_mel",
	"mel_filterbank",
	"power_spectrum",
	"resample",
	"rms",
	"save_archive",
	"standardization_stats",
	"standardize",
]
