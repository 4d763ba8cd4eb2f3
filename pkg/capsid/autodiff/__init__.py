from capsid.autodiff.checkpoint import load_checkpoint, save_checkpoint
from capsid.autodiff.optim import Adam, AdamState, adam_step
from capsid.autodiff.tensor import Graph, Tensor, as_tensor, backward, no_grad, trace

__all__ = [
	"Adam",
	"AdamState",
	"Graph",
	"Tensor",
	"adam_step",
	"as_tensor",
	"backward",
	"load_checkpoint",
	"no_grad",
	"save_checkpoint",
	"trace",
]
