import pytest
import torch
from torch import nn
from safetensors import safe_open
from safetensors.torch import save_file, load_file
from tvt_sr.base.checkpoint import (save_checkpoint, load_checkpoint, CheckpointException, IntegrityException,
                                    SpecMismatchException, LORA_NS, MODEL_NS)
from tvt_sr.base.lora import inject_lora, lora_parameters
from tvt_sr.base.models_base import parameter_digest
from tvt_sr.base.specs import LoraConfig
from tvt_sr.base.unet import build_unet
from conftest import TINY_UNET


def small_net(seed: int) -> nn.Module:
    torch.manual_seed(seed)
    return nn.Sequential(nn.Linear(4, 8), nn.ReLU(), nn.Linear(8, 2))


def test_checkpoint_round_trip(tmp_path):
    net = small_net(0)
    checkpoint = save_checkpoint(tmp_path / 'a.safetensors', {'net': net}, kind='vae', phase='decoder',
                                 spec_hash='abc', step=3, metrics={'l1': 0.5})
    loaded = load_checkpoint(tmp_path / 'a.safetensors', spec_hash='abc')

    assert loaded.checkpoint_id == checkpoint.checkpoint_id
    assert loaded.step == 3 and loaded.manifest.metrics == {'l1': 0.5}
    assert loaded.components == {'net'}

    other = small_net(1)
    assert parameter_digest(other) != parameter_digest(net)
    loaded.restore('net', other)
    assert parameter_digest(other) == parameter_digest(net)


def test_checkpoint_id_is_content_addressed(tmp_path):
    net = small_net(0)
    id_a = save_checkpoint(tmp_path / 'a.safetensors', {'net': net}, kind='vae', phase='p', spec_hash='h',
                           step=0).checkpoint_id
    id_b = save_checkpoint(tmp_path / 'b.safetensors', {'net': net}, kind='vae', phase='p', spec_hash='h',
                           step=5).checkpoint_id
    id_c = save_checkpoint(tmp_path / 'c.safetensors', {'net': small_net(1)}, kind='vae', phase='p', spec_hash='h',
                           step=0).checkpoint_id
    assert id_a == id_b
    assert id_a != id_c


def test_tampered_tensor_fails_digest(tmp_path):
    path = tmp_path / 'a.safetensors'
    save_checkpoint(path, {'net': small_net(0)}, kind='vae', phase='p', spec_hash='h', step=0)
    with safe_open(str(path), framework='pt') as checkpoint_file:
        metadata = checkpoint_file.metadata()
    tensors = load_file(str(path))
    name = sorted(tensors)[0]
    tensors[name] = tensors[name] + 1.0
    save_file(tensors, str(path), metadata=metadata)

    with pytest.raises(IntegrityException, match='digest'):
        load_checkpoint(path)


def test_unreadable_checkpoint(tmp_path):
    path = tmp_path / 'garbage.safetensors'
    path.write_bytes(b'not a checkpoint')
    with pytest.raises(IntegrityException):
        load_checkpoint(path)


@pytest.mark.parametrize('metadata, match', [
    (None, 'no manifest'),
    ({'other': 'value'}, 'no manifest'),
    ({'manifest': '{"format": 1}'}, 'Invalid checkpoint manifest'),
    ({'manifest': 'not json'}, 'Invalid checkpoint manifest'),
])
def test_checkpoint_manifest_is_required(tmp_path, metadata, match):
    path = tmp_path / 'bare.safetensors'
    save_file({'model/net/weight': torch.zeros(2)}, str(path), metadata=metadata)
    with pytest.raises(IntegrityException, match=match):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / 'missing.safetensors')


def test_spec_hash_mismatch(tmp_path):
    path = tmp_path / 'a.safetensors'
    save_checkpoint(path, {'net': small_net(0)}, kind='vae', phase='p', spec_hash='h1', step=0)
    with pytest.raises(SpecMismatchException):
        load_checkpoint(path, spec_hash='h2')


def test_restore_into_mismatched_module(tmp_path):
    checkpoint = save_checkpoint(tmp_path / 'a.safetensors', {'net': small_net(0)}, kind='vae', phase='p',
                                 spec_hash='h', step=0)
    with pytest.raises(SpecMismatchException):
        checkpoint.restore('net', nn.Linear(4, 2))
    with pytest.raises(SpecMismatchException, match='no component'):
        checkpoint.restore('other', small_net(0))


def test_invalid_component_name(tmp_path):
    with pytest.raises(CheckpointException, match='Invalid component'):
        save_checkpoint(tmp_path / 'a.safetensors', {'a/b': small_net(0)}, kind='vae', phase='p', spec_hash='h',
                        step=0)


def test_lora_pairs_live_in_their_own_namespace(tmp_path):
    unet = build_unet(TINY_UNET, seed=0)
    inject_lora(unet, LoraConfig(rank=2), torch.Generator().manual_seed(0))
    with torch.no_grad():
        for _, param in lora_parameters(unet):
            param.add_(0.5)
    checkpoint = save_checkpoint(tmp_path / 'a.safetensors', {'unet': unet}, kind='unet', phase='sr',
                                 spec_hash='h', step=0)
    assert checkpoint.select(LORA_NS, 'unet') and checkpoint.select(MODEL_NS, 'unet')

    # Different base weights, adapters only are restored
    target = build_unet(TINY_UNET, seed=1)
    inject_lora(target, LoraConfig(rank=2), torch.Generator().manual_seed(1))
    base_before = {key: value.clone() for key, value in target.state_dict().items() if 'lora' not in key}
    checkpoint.restore_lora('unet', target)

    assert all(torch.equal(param, dict(lora_parameters(unet))[name]) for name, param in lora_parameters(target))
    assert all(torch.equal(target.state_dict()[key], value) for key, value in base_before.items())


def test_restore_lora_requires_matching_adapters(tmp_path):
    unet = build_unet(TINY_UNET, seed=0)
    inject_lora(unet, LoraConfig(rank=2), torch.Generator().manual_seed(0))
    checkpoint = save_checkpoint(tmp_path / 'a.safetensors', {'unet': unet}, kind='unet', phase='sr',
                                 spec_hash='h', step=0)
    with pytest.raises(SpecMismatchException):
        checkpoint.restore_lora('unet', build_unet(TINY_UNET, seed=0))


def test_optimizer_state_round_trip(tmp_path):
    net = small_net(0)
    optimizer = torch.optim.AdamW(net.parameters(), lr=1e-3)
    for _ in range(2):
        optimizer.zero_grad()
        net(torch.randn(3, 4)).sum().backward()
        optimizer.step()
    checkpoint = save_checkpoint(tmp_path / 'a.safetensors', {'net': net}, kind='vae', phase='p', spec_hash='h',
                                 step=2, optimizers={'net': optimizer})

    restored_net = checkpoint.restore('net', small_net(1))
    restored = torch.optim.AdamW(restored_net.parameters(), lr=1e-3)
    checkpoint.restore_optimizer('net', restored)

    original_state, restored_state = optimizer.state_dict(), restored.state_dict()
    for index, state in original_state['state'].items():
        assert torch.equal(state['exp_avg'], restored_state['state'][index]['exp_avg'])
        assert float(state['step']) == float(restored_state['state'][index]['step'])
    with pytest.raises(CheckpointException):
        checkpoint.restore_optimizer('missing', restored)
