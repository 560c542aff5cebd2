import { describe, expect, it } from 'vitest'

import { buildLossChart, renderLossChartSVG } from '../src/losschart'
import { threeIterationSeries } from './fixtures'

describe('buildLossChart', () => {
  it('marks exactly the accepted/rejected pattern of the records', () => {
    const model = buildLossChart(threeIterationSeries())
    expect(model.markers.map((m) => m.kind)).toEqual(['accepted', 'rejected', 'accepted'])
    expect(model.markers.map((m) => m.r)).toEqual([0, 1, 2])
  })

  it('flags early-exit iterations distinctly', () => {
    const series = threeIterationSeries()
    series[2] = { ...series[2]!, accepted: false, early_exit: true }
    const model = buildLossChart(series)
    expect(model.markers[2]!.kind).toBe('early_exit')
  })

  it('incumbent non-increase is visible in the model', () => {
    const model = buildLossChart(threeIterationSeries())
    expect(model.monotoneNonIncreasing).toBe(true)
    const ys = model.incumbentGoal.map((p) => p.y)
    // goal_loss 0.5 -> 0.25 -> 0.25: the polyline steps down once (SVG y grows downward)
    expect(ys[1]!).toBeGreaterThan(ys[0]!)
    expect(ys[2]!).toBe(ys[1]!)
  })

  it('detects a regressed sequence', () => {
    const series = threeIterationSeries()
    series[2] = {
      ...series[2]!,
      incumbent_loss: { ...series[2]!.incumbent_loss, goal_loss: 0.9 },
    }
    expect(buildLossChart(series).monotoneNonIncreasing).toBe(false)
  })

  it('single-iteration run yields one point', () => {
    const model = buildLossChart(threeIterationSeries().slice(0, 1))
    expect(model.markers).toHaveLength(1)
    expect(model.incumbentGoal).toHaveLength(1)
  })

  it('empty series produces the placeholder state', () => {
    const model = buildLossChart([])
    expect(model.empty).toBe(true)
    expect(renderLossChartSVG(model)).toContain('no iterations yet')
  })
})

describe('renderLossChartSVG', () => {
  it('renders one marker element per iteration with its kind', () => {
    const svg = renderLossChartSVG(buildLossChart(threeIterationSeries()))
    expect(svg.match(/class="marker marker-accepted"/g)).toHaveLength(2)
    expect(svg.match(/class="marker marker-rejected"/g)).toHaveLength(1)
    expect(svg).toContain('data-monotone="true"')
    expect(svg.match(/<polyline/g)).toHaveLength(3) // goal, divergence, cost
  })
})
