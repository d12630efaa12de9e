//! Composition of substeps into one frame, with optional recording of the
//! last substeps for truncated backpropagation.

use crate::actuation::Drive;
use crate::error::Result;
use crate::material::{ParticleMaterial, ParticleMaterialGrad};
use crate::mpm::substep::{Solver, StateAdjoint};
use crate::mpm::ParticleState;

/// Substep-start states of the recorded tail of one frame.
#[derive(Debug, Clone, Default)]
pub struct FrameRecord {
    /// Index of the first recorded substep.
    pub first: usize,
    pub states: Vec<ParticleState>,
}

impl FrameRecord {
    /// True when the recording reaches back to the frame-entry state, so
    /// the backward pass yields its cotangent.
    pub fn covers_entry(&self) -> bool {
        self.first == 0
    }
}

impl Solver {
    /// Runs all substeps of one frame in place, producing the tentative
    /// next state.
    pub fn advance_frame(
        &mut self,
        state: &mut ParticleState,
        materials: &[ParticleMaterial],
        drive: &Drive,
    ) -> Result<()> {
        for s in 0..self.cfg.substeps_per_frame {
            let sd = drive.substep(s, &self.cfg);
            self.substep(state, materials, &sd)?;
        }
        Ok(())
    }

    /// [`Solver::advance_frame`] that keeps the states entering the last
    /// `bptt_window` substeps.
    pub fn advance_frame_recorded(
        &mut self,
        state: &mut ParticleState,
        materials: &[ParticleMaterial],
        drive: &Drive,
    ) -> Result<FrameRecord> {
        let first = self.cfg.first_recorded_substep();
        let mut record = FrameRecord {
            first,
            states: Vec::with_capacity(self.cfg.substeps_per_frame - first),
        };
        for s in 0..self.cfg.substeps_per_frame {
            if s >= first {
                record.states.push(state.clone());
            }
            let sd = drive.substep(s, &self.cfg);
            self.substep(state, materials, &sd)?;
        }
        Ok(record)
    }

    /// Pulls `adj` from the end of the frame back through the recorded
    /// substeps. Afterwards `adj` is the cotangent of the first recorded
    /// state; it only means the frame-entry cotangent when
    /// [`FrameRecord::covers_entry`] holds.
    pub fn frame_backward(
        &mut self,
        record: &FrameRecord,
        materials: &[ParticleMaterial],
        drive: &Drive,
        adj: &mut StateAdjoint,
        material_grads: &mut [ParticleMaterialGrad],
    ) -> Result<()> {
        for (i, start) in record.states.iter().enumerate().rev() {
            let sd = drive.substep(record.first + i, &self.cfg);
            self.substep_backward(start, materials, &sd, adj, material_grads)?;
        }
        Ok(())
    }
}
