use std::io::Write;

use crate::error::Result;

/// CSV trajectory dump with header `episode,step,obs_0..,action_0..,reward,done`.
pub struct TrajectoryWriter<W: Write> {
    out: W,
    obs_dim: usize,
    action_dim: usize,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(mut out: W, obs_dim: usize, action_dim: usize) -> Result<Self> {
        let mut header = vec!["episode".to_string(), "step".to_string()];
        header.extend((0..obs_dim).map(|i| format!("obs_{i}")));
        header.extend((0..action_dim).map(|i| format!("action_{i}")));
        header.push("reward".into());
        header.push("done".into());
        writeln!(out, "{}", header.join(","))?;
        Ok(Self {
            out,
            obs_dim,
            action_dim,
        })
    }

    pub fn row(&mut self, episode: usize, step: usize, obs: &[f64], action: &[f64], reward: f64, done: bool) -> Result<()> {
        debug_assert_eq!(obs.len(), self.obs_dim);
        debug_assert_eq!(action.len(), self.action_dim);
        let mut fields = vec![episode.to_string(), step.to_string()];
        fields.extend(obs.iter().map(|x| x.to_string()));
        fields.extend(action.iter().map(|x| x.to_string()));
        fields.push(reward.to_string());
        fields.push(u8::from(done).to_string());
        writeln!(self.out, "{}", fields.join(","))?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
