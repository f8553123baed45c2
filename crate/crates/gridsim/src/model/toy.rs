//! Small message-passing models used for protocol checks.

use crate::error::{LpError, ModelError};
use crate::event::{EventKind, SimEvent};
use crate::ids::LpId;
use crate::lp::{Behavior, LpContext};
use crate::time::VirtualTime;

use super::{msg_of, Msg};

pub const PING: LpId = LpId(10);
pub const PONG: LpId = LpId(20);
pub const PRODUCER: LpId = LpId(100);

pub fn consumer(i: usize) -> LpId {
    LpId(101 + i as u64)
}

/// Returns a counter to its peer until `rounds` hops have been made.
pub struct Bouncer {
    peer: LpId,
    rounds: u64,
    delay: VirtualTime,
    hops: u64,
}

impl Bouncer {
    pub fn new(peer: LpId, rounds: u64, delay: VirtualTime) -> Self {
        Bouncer { peer, rounds, delay, hops: 0 }
    }
}

impl Behavior for Bouncer {
    fn kind(&self) -> &str {
        "bouncer"
    }

    fn handle(&mut self, e: &SimEvent, ctx: &mut LpContext) -> Result<(), LpError> {
        let Msg::Tick { n } = msg_of(e)? else {
            return Err(ModelError::Payload("bouncer expects ticks".into()).into());
        };
        self.hops += 1;
        let lp = ctx.lp().to_string();
        ctx.record("pingpong_hop", n as f64, &[("lp", &lp)]);
        if n < self.rounds {
            ctx.emit(self.peer, ctx.now().checked_add(self.delay)?, EventKind::Generic, Msg::Tick { n: n + 1 }.encode())?;
        }
        Ok(())
    }

    fn on_end(&mut self, ctx: &mut LpContext) -> Result<(), LpError> {
        let lp = ctx.lp().to_string();
        ctx.record("pingpong_received", self.hops as f64, &[("lp", &lp)]);
        Ok(())
    }
}

/// Broadcasts one numbered message per interval to every consumer.
pub struct Producer {
    consumers: u32,
    messages: u64,
    interval: VirtualTime,
    acks: u64,
}

impl Producer {
    pub fn new(consumers: u32, messages: u64, interval: VirtualTime) -> Self {
        Producer { consumers, messages, interval, acks: 0 }
    }
}

impl Behavior for Producer {
    fn kind(&self) -> &str {
        "producer"
    }

    fn handle(&mut self, e: &SimEvent, ctx: &mut LpContext) -> Result<(), LpError> {
        match msg_of(e)? {
            Msg::Tick { n } => {
                let at = ctx.now().checked_add(self.interval)?;
                for i in 0..self.consumers as usize {
                    ctx.emit(consumer(i), at, EventKind::Generic, Msg::Tick { n }.encode())?;
                }
                if n + 1 < self.messages {
                    ctx.emit(ctx.lp(), at, EventKind::Wakeup, Msg::Tick { n: n + 1 }.encode())?;
                }
            }
            Msg::Ack => self.acks += 1,
            other => return Err(ModelError::Payload(format!("producer got {other:?}")).into()),
        }
        Ok(())
    }

    fn on_end(&mut self, ctx: &mut LpContext) -> Result<(), LpError> {
        ctx.record("star_acks", self.acks as f64, &[]);
        Ok(())
    }
}

/// Records each broadcast and acknowledges it.
pub struct Consumer;

impl Behavior for Consumer {
    fn kind(&self) -> &str {
        "consumer"
    }

    fn handle(&mut self, e: &SimEvent, ctx: &mut LpContext) -> Result<(), LpError> {
        let Msg::Tick { n } = msg_of(e)? else {
            return Err(ModelError::Payload("consumer expects ticks".into()).into());
        };
        let lp = ctx.lp().to_string();
        ctx.record("star_received", n as f64, &[("consumer", &lp)]);
        ctx.send(e.src_lp, EventKind::Generic, Msg::Ack.encode())
    }
}
