import streamlit as st
import pandas as pd
from datetime import datetime
from pathlib import Path
import pytz
import logging

# Import custom modules
from training.ablation import PUBLISHED_TABLE_MCA, PUBLISHED_TABLE_SIZE, ablation_tables
from training.trainer import CheckpointGenerator
from models.flow_core import SamplerConfig
from utils.data_pipeline import load_manifest, load_triplet, SPLITS
from utils.metrics import dcor_image_pair
from utils.render25d import compose_preview, surface_figure, DEFAULT_Z_SCALE, SUBDIVISION_FACTORS
from utils.run_config import derive_seed

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

# Page configuration
st.set_page_config(
    page_title="Geodiffussr Terrain Texture Studio",
    page_icon="🏔️",
    layout="wide",
    initial_sidebar_state="expanded"
)

UTC = pytz.utc

def get_utc_time():
    """Get current time in UTC"""
    return datetime.now(UTC)

def initialize_session_state():
    """Initialize all session state variables"""
    defaults = {
        'manifest_path': "runs/dataset-synth/manifest.json",
        'checkpoint_path': "runs/train/checkpoint.pt",
        'ablation_dir': "runs/ablate",
        'selected_record': None,
        'generated': {},
        'last_sample_time': None,
        'errors': [],
    }

    for key, value in defaults.items():
        if key not in st.session_state:
            st.session_state[key] = value

@st.cache_resource(show_spinner=False)
def get_manifest(path: str):
    return load_manifest(path)

@st.cache_resource(show_spinner=False)
def get_generator(path: str):
    return CheckpointGenerator.from_checkpoint(path)

def record_error(source, error):
    """Keep the last few errors for the status panel"""
    st.session_state.errors.append({
        'time': get_utc_time().strftime('%H:%M:%S'),
        'source': source,
        'error': str(error),
    })
    st.session_state.errors = st.session_state.errors[-10:]

def display_triplet_browser(manifest):
    """Browse records of one split with their DEM, texture and caption"""
    st.markdown("### 🗺️ Triplet Browser")

    col1, col2 = st.columns([1, 2])
    with col1:
        split = st.selectbox("Split", list(SPLITS), index=1)
        biomes = ["all"] + manifest.biomes()
        biome = st.selectbox("Biome", biomes)

    records = [r for r in manifest.by_split(split) if biome == "all" or r.biome == biome]
    if not records:
        st.info(f"No records in split '{split}' for biome '{biome}'")
        return None

    with col2:
        record_id = st.selectbox("Record", [r.record_id for r in records])
    record = next(r for r in records if r.record_id == record_id)
    st.session_state.selected_record = record_id

    try:
        dem, texture, caption = load_triplet(manifest, record)
    except Exception as e:
        logger.error(f"Failed to load triplet {record_id}: {e}")
        record_error("triplet", e)
        st.error(f"Failed to load {record_id}: {e}")
        return None

    col_dem, col_tex, col_info = st.columns(3)
    with col_dem:
        st.image(dem.elevation, caption="DEM (normalized)", clamp=True, use_container_width=True)
    with col_tex:
        st.image(texture.to_uint8(), caption="Reference texture", use_container_width=True)
    with col_info:
        st.markdown(f"**Caption:** {caption}")
        st.markdown(f"**Biome:** {record.biome} | **AOI:** {record.aoi_id}")
        try:
            st.metric("dCor(texture, DEM)", f"{dcor_image_pair(texture, dem):.4f}")
        except ValueError as e:
            st.caption(f"dCor unavailable: {e}")

    return dem, texture, caption, record

def display_sampler(dem, caption, record_id):
    """Sample a texture for the selected DEM from a trained checkpoint"""
    st.markdown("### 🎨 Texture Sampling")

    col1, col2, col3 = st.columns(3)
    with col1:
        prompt = st.text_input("Prompt", value=caption)
    with col2:
        steps = st.slider("Euler steps", min_value=5, max_value=100, value=50, step=5)
    with col3:
        cfg_scale = st.slider("Guidance scale", min_value=0.0, max_value=15.0, value=8.0, step=0.5)
    seed = st.number_input("Seed", min_value=0, value=0, step=1)

    if st.button("🚀 Generate", type="primary", use_container_width=True):
        checkpoint = st.session_state.checkpoint_path
        if not Path(checkpoint).exists():
            st.warning(f"Checkpoint not found: {checkpoint}")
            return None
        try:
            with st.spinner("Sampling..."):
                generator = get_generator(checkpoint)
                generator.sampler = SamplerConfig(steps=steps, cfg_scale=cfg_scale, seed=int(seed))
                noise_seed = derive_seed(int(seed), "sample")
                texture = generator.sample([dem], [prompt], seeds=[noise_seed])[0]
            st.session_state.generated[record_id] = texture
            st.session_state.last_sample_time = get_utc_time()
            logger.info(f"Sampled texture for {record_id} (steps={steps}, w={cfg_scale}, seed={seed})")
        except Exception as e:
            logger.error(f"Sampling failed for {record_id}: {e}")
            record_error("sample", e)
            st.error(f"Sampling failed: {e}")

    texture = st.session_state.generated.get(record_id)
    if texture is not None:
        col_img, col_metric = st.columns([2, 1])
        with col_img:
            st.image(texture.to_uint8(), caption="Generated texture", use_container_width=True)
        with col_metric:
            try:
                st.metric("dCor(generated, DEM)", f"{dcor_image_pair(texture, dem):.4f}")
            except ValueError as e:
                st.caption(f"dCor unavailable: {e}")
    return texture

def display_preview(dem, texture, title):
    """Hillshaded 2.5D preview and interactive surface"""
    st.markdown("### ⛰️ 2.5D Preview")

    col1, col2 = st.columns(2)
    with col1:
        factor = st.select_slider("Subdivision", options=list(SUBDIVISION_FACTORS), value=4)
    with col2:
        z_scale = st.slider("Vertical scale", min_value=1.0, max_value=32.0, value=DEFAULT_Z_SCALE)

    try:
        preview = compose_preview(dem, texture, factor=factor, z_scale=z_scale)
    except ValueError as e:
        logger.error(f"Preview failed: {e}")
        record_error("render", e)
        st.error(f"Preview failed: {e}")
        return

    col_img, col_fig = st.columns(2)
    with col_img:
        st.image(preview.image, caption=f"Hillshade ×{factor}", use_container_width=True)
    with col_fig:
        st.plotly_chart(surface_figure(dem, texture, z_scale=z_scale, title=title), use_container_width=True)

def display_ablation_results():
    """Ablation tables from an ablate run, next to the published reference numbers"""
    st.markdown("### 📊 Ablation Results")

    runs_csv = Path(st.session_state.ablation_dir) / "ablation_runs.csv"
    if runs_csv.exists():
        try:
            df = pd.read_csv(runs_csv)
            tables = ablation_tables(df)
            st.dataframe(tables["summary"], use_container_width=True)

            metric = st.selectbox("Per-seed table", [k for k in tables if k != "summary"])
            st.dataframe(tables[metric], use_container_width=True)

            st.download_button(
                label="📥 Download runs (CSV)",
                data=df.to_csv(index=False),
                file_name=f"ablation_runs_{get_utc_time().strftime('%Y%m%d_%H%M%S')}.csv",
                mime="text/csv",
                use_container_width=True
            )
        except Exception as e:
            logger.error(f"Failed to read ablation results: {e}")
            record_error("ablation", e)
            st.error(f"Failed to read {runs_csv}: {e}")
    else:
        st.info(f"No ablation results at {runs_csv}. Run `geodiffussr ablate --out {st.session_state.ablation_dir}` first.")

    with st.expander("Published full-scale reference results"):
        st.markdown("**MCA injection**")
        st.dataframe(PUBLISHED_TABLE_MCA, use_container_width=True)
        st.markdown("**Model size**")
        st.dataframe(PUBLISHED_TABLE_SIZE, use_container_width=True)

def display_system_status():
    """Paths, last sample time and recent errors"""
    st.markdown("### 🔧 Status")
    st.markdown(f"**Manifest:** `{st.session_state.manifest_path}`")
    st.markdown(f"**Checkpoint:** {'🟢' if Path(st.session_state.checkpoint_path).exists() else '🔴'} "
                f"`{st.session_state.checkpoint_path}`")
    last = st.session_state.last_sample_time
    st.markdown(f"**Last sample:** {last.strftime('%H:%M:%S UTC') if last else 'never'}")

    if st.session_state.errors:
        with st.expander(f"⚠️ Recent errors ({len(st.session_state.errors)})"):
            st.dataframe(pd.DataFrame(st.session_state.errors), use_container_width=True)

def main():
    """Main application function"""
    initialize_session_state()

    st.title("🏔️ Geodiffussr Terrain Texture Studio")
    st.caption("DEM- and text-conditioned terrain textures via flow matching")

    with st.sidebar:
        st.markdown("### ⚙️ Configuration")
        st.session_state.manifest_path = st.text_input("Dataset manifest", value=st.session_state.manifest_path)
        st.session_state.checkpoint_path = st.text_input("Checkpoint", value=st.session_state.checkpoint_path)
        st.session_state.ablation_dir = st.text_input("Ablation output", value=st.session_state.ablation_dir)
        if st.button("🔄 Reload", use_container_width=True):
            st.cache_resource.clear()
            st.session_state.generated = {}

    col1, col2 = st.columns([3, 1])

    with col1:
        tab_data, tab_ablation = st.tabs(["Dataset & Sampling", "Ablations"])
        with tab_data:
            manifest = None
            if Path(st.session_state.manifest_path).exists():
                try:
                    manifest = get_manifest(st.session_state.manifest_path)
                except Exception as e:
                    logger.error(f"Failed to load manifest: {e}")
                    record_error("manifest", e)
                    st.error(f"Failed to load manifest: {e}")
            else:
                st.info("No dataset yet. Create one with `geodiffussr dataset-synth --n 64`.")

            if manifest is not None:
                selection = display_triplet_browser(manifest)
                if selection is not None:
                    dem, reference, caption, record = selection
                    generated = display_sampler(dem, caption, record.record_id)
                    display_preview(dem, generated if generated is not None else reference,
                                    title=f"{record.record_id}: {caption}")
        with tab_ablation:
            display_ablation_results()

    with col2:
        display_system_status()

if __name__ == "__main__":
    main()
