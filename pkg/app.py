"""
LATEBIND - Run Dashboard
Streamlit UI over the artifacts of one output directory
"""

import os
import sys
from pathlib import Path

import streamlit as st

sys.path.insert(0, str(Path(__file__).parent / 'src'))

from configlib import DEFAULT_OUT_DIR
from reportlib import load_run, validate_run

st.set_page_config(
    page_title="LATEBIND - Learned Cache Dashboard",
    page_icon="⚡",
    layout="wide"
)


@st.cache_data
def load(out_dir: str):
    """Read every artifact of a run (re-read when the directory changes)"""
    return load_run(out_dir)


def _floats(rows, column):
    return [float(r[column]) for r in rows]


st.title("⚡ LATEBIND")
st.subheader("Learned caches for late-binding inference")

with st.sidebar:
    st.header("Run")
    out_dir = st.text_input("Output directory", os.getenv('LATEBIND_OUT_DIR', DEFAULT_OUT_DIR))
    if st.button("Reload"):
        load.clear()

    st.divider()
    errors, warnings = validate_run(out_dir) if Path(out_dir).is_dir() else ([f"{out_dir} not found"], [])
    if errors:
        st.error(f"{len(errors)} validation errors")
        for err in errors[:5]:
            st.caption(f"✗ {err}")
    else:
        st.success("✓ Artifacts validate")
    for warn in warnings:
        st.caption(f"⚠️ {warn}")

if not Path(out_dir).is_dir():
    st.warning("Run `python latebind.py prepare` (or `explore --fixture tradeoff`) first.")
    st.stop()

run = load(out_dir)

# Plan
plan = run.get('plan')
profile = run.get('profile')
if plan:
    st.header("Deployed plan")
    col1, col2, col3 = st.columns(3)
    col1.metric("Expected latency", f"{plan['expected_latency_ms']:.3f} ms",
                f"{plan['expected_latency_ms'] - plan['total_latency_ms']:.3f} ms vs base")
    col2.metric("Plan accuracy", f"{plan['plan_accuracy']:.4f}")
    col3.metric("Memory", f"{plan['memory_mb']:.4f} MB")
    if plan['chosen']:
        st.table([{'variant': f"L{c['layer']}_V{c['variant_id']}", 'arch': c['arch'],
                   'hit rate': c['hit_rate'], 'effective hit rate': c['effective_hit_rate'],
                   'accuracy': c['accuracy'], 'lookup ms': c['lookup_ms']} for c in plan['chosen']])
    else:
        st.info("Empty plan: every request runs the full model")
elif profile:
    st.info("No plan yet: run `python latebind.py compose`")

# Variant metrics
metrics = run.get('metrics')
if metrics:
    with st.expander(f"Variant metrics ({len(metrics['rows'])} rows, source: {metrics.get('source', '?')})"):
        st.table(metrics['rows'])

curve = run.get('alpha_curve')
if curve:
    st.subheader("Alpha sweep")
    st.line_chart({'alpha': _floats(curve, 'alpha'), 'expected latency (ms)': _floats(curve, 'expected_latency_ms')},
                  x='alpha')

# Serving simulation
summary = run.get('summary')
if summary:
    st.header(f"Serving simulation ({summary['mode']}-driven)")
    for name in ('static', 'adaptive'):
        if name not in summary:
            continue
        s = summary[name]
        cols = st.columns(4)
        cols[0].metric(f"{name} avg latency", f"{s['avg_latency_ms']:.3f} ms")
        cols[1].metric("p99", f"{s['p99_latency_ms']:.3f} ms")
        cols[2].metric("Hit fraction", f"{s['hit_fraction']:.3f}")
        cols[3].metric("Agreement with base", f"{s['agreement_with_base']:.4f}")

    timeline = run.get('hit_timeline')
    if timeline:
        st.subheader("Hit rate per interval")
        series = {}
        for row in timeline:
            series.setdefault(row['mode'], []).append(float(row['hit_rate']))
        length = min(len(v) for v in series.values())
        st.line_chart({mode: values[:length] for mode, values in series.items()})

    cdf = run.get('latency_cdf')
    if cdf:
        st.subheader("Latency CDF (static)")
        static = [r for r in cdf if r['mode'] == 'static']
        st.line_chart({'latency_ms': _floats(static, 'latency_ms'), 'fraction': _floats(static, 'fraction')},
                      x='latency_ms')

# Query planning
plan_summary = run.get('plan_summary')
if plan_summary:
    st.header("Query planning")
    static = [r for r in plan_summary if r['replan'] == '0']
    replan = [r for r in plan_summary if r['replan'] == '1']
    st.line_chart({'slo_ms': _floats(static, 'slo_ms'),
                   'static': _floats(static, 'mean_accuracy'),
                   'replan': _floats(replan, 'mean_accuracy')}, x='slo_ms')
    audit = run.get('plan_audit')
    if audit and audit.get('queries'):
        with st.expander(f"Audit log ({len(audit['queries'])} queries, replan={audit['replan']})"):
            st.json(audit['queries'][:5])

st.divider()
if run.get('manifest'):
    st.caption(f"config {run['manifest'].get('config_hash', '?')} • tool {run['manifest'].get('tool_version', '?')}")
