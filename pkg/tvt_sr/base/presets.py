"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.base.presets
 This module registers the architecture presets: SD-scale reference models, the compact VAE-D4, ablation variants
 and their desk-scale (toy) counterparts
"""
from .catalog import register, PresetKind
from .specs import VaeSpec, UnetSpec, CeUnetSpec, LoraConfig, PipelineSpec

#
# VAE presets
#


@register('d8', 'VAE-D8, SD 2.1-base autoencoder', PresetKind.VAE)
def vae_d8() -> VaeSpec:
    return VaeSpec(downsample_factor=8, stage_channels=(128, 256, 512, 512), blocks_per_stage=2,
                   has_mid_attention=True)


@register('d4', 'compact VAE-D4, 3 stages 128/256/256 without mid block', PresetKind.VAE)
def vae_d4() -> VaeSpec:
    return VaeSpec(downsample_factor=4, stage_channels=(128, 256, 256), blocks_per_stage=2, has_mid_attention=False)


@register('v1', 'VAE-D4 ablation V1, SD channels on 3 stages with mid block', PresetKind.VAE)
def vae_v1() -> VaeSpec:
    return VaeSpec(downsample_factor=4, stage_channels=(128, 256, 512), blocks_per_stage=2, has_mid_attention=True)


@register('v2', 'VAE-D4 ablation V2, SD channels on 3 stages without mid block', PresetKind.VAE)
def vae_v2() -> VaeSpec:
    return VaeSpec(downsample_factor=4, stage_channels=(128, 256, 512), blocks_per_stage=2, has_mid_attention=False)


@register('d8-sc', 'VAE-D8 with encoder to decoder skip connections (pipeline S2)', PresetKind.VAE)
def vae_d8_sc() -> VaeSpec:
    return VaeSpec(downsample_factor=8, stage_channels=(128, 256, 512, 512), blocks_per_stage=2,
                   has_mid_attention=True, skip_connections=True)


@register('d8-c8', 'VAE-D8 with 8 latent channels (pipeline S3)', PresetKind.VAE)
def vae_d8_c8() -> VaeSpec:
    return VaeSpec(downsample_factor=8, stage_channels=(128, 256, 512, 512), blocks_per_stage=2,
                   has_mid_attention=True, latent_channels=8)


@register('toy-d8', 'desk-scale VAE-D8, channels scaled by 1/8', PresetKind.VAE)
def vae_toy_d8() -> VaeSpec:
    return VaeSpec(downsample_factor=8, stage_channels=(16, 32, 64, 64), blocks_per_stage=1,
                   has_mid_attention=True, base_resolution=64)


@register('toy-d4', 'desk-scale compact VAE-D4, channels scaled by 1/8', PresetKind.VAE)
def vae_toy_d4() -> VaeSpec:
    return VaeSpec(downsample_factor=4, stage_channels=(16, 32, 32), blocks_per_stage=1, has_mid_attention=False,
                   base_resolution=64)

#
# UNet presets
#


@register('sd21-unet', 'SD 2.1-base denoising UNet', PresetKind.UNET)
def unet_sd21() -> UnetSpec:
    return UnetSpec()


@register('sd21-unet-c8', 'SD 2.1-base UNet on 8-channel latents (pipeline S3)', PresetKind.UNET)
def unet_sd21_c8() -> UnetSpec:
    return UnetSpec(in_channels=8, out_channels=8)


@register('sd21-unet-pruned', 'SD 2.1-base UNet with channels pruned by 25% (pipeline S5)', PresetKind.UNET)
def unet_sd21_pruned() -> UnetSpec:
    return UnetSpec(block_channels=(240, 480, 960, 960), head_dim=48)


@register('toy-unet', 'desk-scale denoising UNet', PresetKind.UNET)
def unet_toy() -> UnetSpec:
    return UnetSpec(block_channels=(32, 64, 64), attention_levels=(True, True, False), layers_per_block=1,
                    head_dim=16, context_dim=32, context_tokens=4, toy_scale=True)


@register('ce-sd21', 'compute-efficient UNet around SD 2.1-base, whole first/last levels replicated',
          PresetKind.CE_UNET)
def ce_unet_sd21() -> CeUnetSpec:
    return CeUnetSpec(base=unet_sd21(), replica_depth=2, lora=LoraConfig(rank=4))


@register('toy-ce', 'desk-scale compute-efficient UNet', PresetKind.CE_UNET)
def ce_unet_toy() -> CeUnetSpec:
    return CeUnetSpec(base=unet_toy(), replica_depth=1, lora=LoraConfig(rank=4))

#
# End-to-end pipeline presets, one 512x512 restoration
#


@register('s1', 'pipeline S1: VAE-D8 + UNet', PresetKind.PIPELINE)
def pipeline_s1() -> PipelineSpec:
    return PipelineSpec(vae=vae_d8(), unet=unet_sd21())


@register('s2', 'pipeline S2: VAE-D8 with skip connections + UNet', PresetKind.PIPELINE)
def pipeline_s2() -> PipelineSpec:
    return PipelineSpec(vae=vae_d8_sc(), unet=unet_sd21())


@register('s3', 'pipeline S3: VAE-D8 with 8 latent channels + UNet', PresetKind.PIPELINE)
def pipeline_s3() -> PipelineSpec:
    return PipelineSpec(vae=vae_d8_c8(), unet=unet_sd21_c8())


@register('s4', 'pipeline S4: VAE-D4 + UNet at 2x latent resolution', PresetKind.PIPELINE)
def pipeline_s4() -> PipelineSpec:
    return PipelineSpec(vae=vae_d4(), unet=unet_sd21())


@register('s5', 'pipeline S5: VAE-D4 + pruned UNet', PresetKind.PIPELINE)
def pipeline_s5() -> PipelineSpec:
    return PipelineSpec(vae=vae_d4(), unet=unet_sd21_pruned())


@register('tvt', 'pipeline TVT: VAE-D4 + compute-efficient UNet', PresetKind.PIPELINE)
def pipeline_tvt() -> PipelineSpec:
    return PipelineSpec(vae=vae_d4(), ce_unet=ce_unet_sd21())


@register('v1-ce', 'pipeline with VAE-D4 ablation V1 + compute-efficient UNet', PresetKind.PIPELINE)
def pipeline_v1() -> PipelineSpec:
    return PipelineSpec(vae=vae_v1(), ce_unet=ce_unet_sd21())


@register('v2-ce', 'pipeline with VAE-D4 ablation V2 + compute-efficient UNet', PresetKind.PIPELINE)
def pipeline_v2() -> PipelineSpec:
    return PipelineSpec(vae=vae_v2(), ce_unet=ce_unet_sd21())


@register('toy-tvt', 'desk-scale pipeline: toy VAE-D4 + toy compute-efficient UNet', PresetKind.PIPELINE)
def pipeline_toy_tvt() -> PipelineSpec:
    return PipelineSpec(vae=vae_toy_d4(), ce_unet=ce_unet_toy(), output_resolution=64)
