from capsid.models.capsules import (
	CapsuleLayerParams,
	RoutingState,
	RoutingStep,
	capsule_layer,
	mask_digitcaps,
	predict_vectors,
	route,
	squash,
)
from capsid.models.losses import LossConfig, margin_loss, reconstruction_loss, total_loss
from capsid.models.networks import (
	Architecture,
	ConvSpec,
	Model,
	ModelConfig,
	build_model,
	load_model,
	min_frames,
	predict_classes,
	save_model,
)

__all__ = [
	"Architecture",
	"CapsuleLayerParams",
	"ConvSpec",
	"LossConfig",
	"Model",
	"ModelConfig",
	"RoutingState",
	"RoutingStep",
	"build_model",
	"capsule_layer",
	"load_model",
	"margin_loss",
	"mask_digitcaps",
	"min_frames",
	"predict_classes",
	"predict_vectors",
	"reconstruction_loss",
	"route",
	"save_model",
	"squash",
	"total_loss",
]
