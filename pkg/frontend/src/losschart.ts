// Loss-over-iterations chart model and a dependency-free SVG renderer.
// Incumbent components are drawn as polylines; every iteration carries a
// candidate marker, visually split into accepted / rejected / early-exit.

import type { LossSeriesEntry } from './types'

export type MarkerKind = 'accepted' | 'rejected' | 'early_exit'

export interface ChartMarker {
  r: number
  x: number
  y: number
  kind: MarkerKind
  candidateGoalLoss: number
}

export interface ChartModel {
  empty: boolean
  width: number
  height: number
  incumbentGoal: Array<{ x: number; y: number }>
  incumbentDivergence: Array<{ x: number; y: number }>
  incumbentCost: Array<{ x: number; y: number }>
  markers: ChartMarker[]
  monotoneNonIncreasing: boolean
  maxCost: number
}

const MARGIN = 24

function xPosition(r: number, count: number, width: number): number {
  if (count <= 1) return width / 2
  return MARGIN + (r * (width - 2 * MARGIN)) / (count - 1)
}

function yPosition(value: number, scale: number, height: number): number {
  const clamped = Math.max(0, Math.min(1, scale === 0 ? 0 : value / scale))
  return height - MARGIN - clamped * (height - 2 * MARGIN)
}

export function buildLossChart(series: LossSeriesEntry[], width = 640, height = 240): ChartModel {
  if (series.length === 0) {
    return {
      empty: true,
      width,
      height,
      incumbentGoal: [],
      incumbentDivergence: [],
      incumbentCost: [],
      markers: [],
      monotoneNonIncreasing: true,
      maxCost: 0,
    }
  }
  const count = series.length
  const maxCost = Math.max(1, ...series.map((s) => Math.max(s.incumbent_loss.cost, s.candidate_loss.cost)))
  const incumbentGoal = series.map((s) => ({
    x: xPosition(s.r, count, width),
    y: yPosition(s.incumbent_loss.goal_loss, 1, height),
  }))
  const incumbentDivergence = series.map((s) => ({
    x: xPosition(s.r, count, width),
    y: yPosition(s.incumbent_loss.divergence, 1, height),
  }))
  const incumbentCost = series.map((s) => ({
    x: xPosition(s.r, count, width),
    y: yPosition(s.incumbent_loss.cost, maxCost, height),
  }))
  const markers: ChartMarker[] = series.map((s) => ({
    r: s.r,
    x: xPosition(s.r, count, width),
    y: yPosition(s.candidate_loss.goal_loss, 1, height),
    kind: s.early_exit ? 'early_exit' : s.accepted ? 'accepted' : 'rejected',
    candidateGoalLoss: s.candidate_loss.goal_loss,
  }))
  let monotone = true
  for (let i = 1; i < series.length; i++) {
    const prev = series[i - 1]!.incumbent_loss
    const here = series[i]!.incumbent_loss
    const regressed =
      here.goal_loss > prev.goal_loss + 1e-9 ||
      (Math.abs(here.goal_loss - prev.goal_loss) <= 1e-9 && here.divergence > prev.divergence + 1e-9)
    if (regressed) monotone = false
  }
  return {
    empty: false,
    width,
    height,
    incumbentGoal,
    incumbentDivergence,
    incumbentCost,
    markers,
    monotoneNonIncreasing: monotone,
    maxCost,
  }
}

function polyline(points: Array<{ x: number; y: number }>, stroke: string): string {
  if (points.length === 0) return ''
  const attr = points.map((p) => `${p.x.toFixed(1)},${p.y.toFixed(1)}`).join(' ')
  return `<polyline fill="none" stroke="${stroke}" stroke-width="2" points="${attr}"/>`
}

const MARKER_STYLE: Record<MarkerKind, string> = {
  accepted: 'fill="#2bbf6a"',
  rejected: 'fill="none" stroke="#ff4d4f" stroke-width="2"',
  early_exit: 'fill="#5aa7ff"',
}

export function renderLossChartSVG(model: ChartModel): string {
  if (model.empty) {
    return '<svg class="loss-chart" role="img"><text x="12" y="24">no iterations yet</text></svg>'
  }
  const body = [
    polyline(model.incumbentGoal, '#dd8452'),
    polyline(model.incumbentDivergence, '#937860'),
    polyline(model.incumbentCost, '#8172b3'),
    ...model.markers.map(
      (m) =>
        `<circle class="marker marker-${m.kind}" data-r="${m.r}" data-kind="${m.kind}" ` +
        `cx="${m.x.toFixed(1)}" cy="${m.y.toFixed(1)}" r="5" ${MARKER_STYLE[m.kind]}/>`,
    ),
  ].join('\n  ')
  return (
    `<svg class="loss-chart" role="img" viewBox="0 0 ${model.width} ${model.height}" ` +
    `data-monotone="${model.monotoneNonIncreasing}">\n  ${body}\n</svg>`
  )
}
